//! Building blocks shared by the encoder, decoder and classifier.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

use super::params::{Bound, ParamId, ParamStore};

/// Standard deviation of the truncated-normal projection init.
pub const INIT_STD: f64 = 0.02;

fn last_dim<T: Scalar>(tape: &Tape<T>, x: Var) -> usize {
    *tape.shape(x).last().unwrap_or(&1)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut RngStream,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::trunc_normal(&[d_in, d_out], INIT_STD, rng),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// `x[..., d_in] @ W + b`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        if last_dim(tape, x) != self.d_in {
            return Err(Error::Shape(format!(
                "linear expects last dim {}, got {:?}",
                self.d_in,
                tape.shape(x)
            )));
        }
        let y = tape.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => tape.add(y, p[b]),
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
            dim,
            eps: 1e-6,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let axis = tape.shape(x).len() - 1;
        if last_dim(tape, x) != self.dim {
            return Err(Error::Shape(format!("layer norm over {} got {:?}", self.dim, tape.shape(x))));
        }
        let mean = tape.mean_axis(x, axis, true)?;
        let centered = tape.sub(x, mean)?;
        let var = tape.var_axis(x, axis, true)?;
        let var = tape.add_scalar(var, T::from_f64_lossy(self.eps));
        let inv_std = tape.pow(var, T::from_f64_lossy(-0.5));
        let normed = tape.mul(centered, inv_std)?;
        let scaled = tape.mul(normed, p[self.gamma])?;
        tape.add(scaled, p[self.beta])
    }
}

/// Batch statistics of one training-mode batch-norm call.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance, the quantity folded into the running value.
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[dim]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[dim]), false),
            dim,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// `x[B, D]`. Training mode normalizes with batch statistics and returns
    /// them so the caller can fold them into the running estimates.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        mode: NormMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::Shape(format!("batch norm over {} got {shape:?}", self.dim)));
        }
        let eps = T::from_f64_lossy(self.eps);
        match mode {
            NormMode::Train => {
                let b = shape[0];
                if b < 2 {
                    return Err(Error::Contract(
                        "batch norm in training mode needs at least 2 samples".into(),
                    ));
                }
                let mean = tape.mean_axis(x, 0, true)?;
                let var = tape.var_axis(x, 0, true)?;
                let stats = BatchStats {
                    mean: tape.value(mean).iter().map(|v| v.as_f64()).collect(),
                    var_unbiased: tape
                        .value(var)
                        .iter()
                        .map(|v| v.as_f64() * b as f64 / (b as f64 - 1.0))
                        .collect(),
                };
                let centered = tape.sub(x, mean)?;
                let var = tape.add_scalar(var, eps);
                let inv_std = tape.pow(var, T::from_f64_lossy(-0.5));
                let normed = tape.mul(centered, inv_std)?;
                let scaled = tape.mul(normed, p[self.gamma])?;
                Ok((tape.add(scaled, p[self.beta])?, Some(stats)))
            }
            NormMode::Eval => {
                let centered = tape.sub(x, p[self.running_mean])?;
                let var = tape.add_scalar(p[self.running_var], eps);
                let inv_std = tape.pow(var, T::from_f64_lossy(-0.5));
                let normed = tape.mul(centered, inv_std)?;
                let scaled = tape.mul(normed, p[self.gamma])?;
                Ok((tape.add(scaled, p[self.beta])?, None))
            }
        }
    }

    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, stats: &BatchStats) {
        let m = self.momentum;
        let rm = store.get_mut(self.running_mean).value.data_mut();
        for (r, &b) in rm.iter_mut().zip(&stats.mean) {
            *r = T::from_f64_lossy((1.0 - m) * r.as_f64() + m * b);
        }
        let rv = store.get_mut(self.running_var).value.data_mut();
        for (r, &b) in rv.iter_mut().zip(&stats.var_unbiased) {
            *r = T::from_f64_lossy((1.0 - m) * r.as_f64() + m * b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct PRelu {
    pub slope: ParamId,
}

impl PRelu {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str) -> Self {
        Self {
            slope: store.add(format!("{name}.slope"), Tensor::full(&[1], T::from_f64_lossy(0.25)), true),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.prelu(x, p[self.slope])
    }
}

/// Inverted dropout. Identity when `p == 0` or when no random stream is
/// supplied (inactive).
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        Ok(Self { p })
    }

    pub fn mask<T: Scalar>(&self, shape: &[usize], rng: &mut RngStream) -> Tensor<T> {
        let keep = T::from_f64_lossy(1.0 / (1.0 - self.p));
        Tensor::from_fn(shape, |_| if rng.uniform() < self.p { T::zero() } else { keep })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, rng: Option<&mut RngStream>) -> Result<Var> {
        match rng {
            Some(rng) if self.p > 0.0 => {
                let mask = self.mask::<T>(tape.shape(x), rng);
                let m = tape.constant(&mask);
                tape.mul(x, m)
            }
            _ => Ok(x),
        }
    }
}

/// Multi-head self-attention with a fused QKV projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng),
            heads,
            dim,
        })
    }

    /// `x[B, N, D] -> [B, N, D]`. `key_mask[b][j] == false` hides token `j`
    /// of batch entry `b` from every query (its logit is set to -inf).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        key_mask: Option<&[Vec<bool>]>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::Shape(format!("attention over dim {} got {shape:?}", self.dim)));
        }
        let (b, n, h) = (shape[0], shape[1], self.heads);
        let dh = self.dim / h;
        let qkv = self.qkv.forward(tape, p, x)?;
        let qkv = tape.reshape(qkv, &[b, n, 3, h, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?; // [3, B, h, N, dh]
        let q = tape.slice(qkv, 0, 0, 1)?;
        let k = tape.slice(qkv, 0, 1, 2)?;
        let v = tape.slice(qkv, 0, 2, 3)?;
        let q = tape.reshape(q, &[b, h, n, dh])?;
        let k = tape.reshape(k, &[b, h, n, dh])?;
        let v = tape.reshape(v, &[b, h, n, dh])?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let mut scores = tape.mul_scalar(scores, T::from_f64_lossy(1.0 / (dh as f64).sqrt()));
        if let Some(mask) = key_mask {
            if mask.len() != b || mask.iter().any(|m| m.len() != n) {
                return Err(Error::Shape("attention key mask does not match input".into()));
            }
            let bias = Tensor::<T>::from_fn(&[b, 1, 1, n], |i| {
                if mask[i / n][i % n] {
                    T::zero()
                } else {
                    T::neg_infinity()
                }
            });
            let bias = tape.constant(&bias);
            scores = tape.add(scores, bias)?;
        }
        let attn = tape.softmax(scores)?;
        let out = tape.matmul(attn, v)?; // [B, h, N, dh]
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        let out = tape.reshape(out, &[b, n, self.dim])?;
        self.proj.forward(tape, p, out)
    }
}

/// Position-wise feed-forward block: linear, GELU, linear.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: FeedForward::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        key_mask: Option<&[Vec<bool>]>,
    ) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let h = self.attn.forward(tape, p, h, key_mask)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, p, x)?;
        let h = self.mlp.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Fixed 2-D sine-cosine position table for a `grid x grid` token layout,
/// `[grid*grid, dim]`. Half of the channels encode the row, half the column.
pub fn sincos_position_table<T: Scalar>(grid: usize, dim: usize) -> Result<Tensor<T>> {
    if dim % 4 != 0 {
        return Err(Error::Config(format!(
            "position embedding dim {dim} must be divisible by 4"
        )));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10_000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(grid * grid * dim);
    for r in 0..grid {
        for c in 0..grid {
            for &pos in &[r as f64, c as f64] {
                data.extend(omega.iter().map(|w| T::from_f64_lossy((pos * w).sin())));
                data.extend(omega.iter().map(|w| T::from_f64_lossy((pos * w).cos())));
            }
        }
    }
    Tensor::new(&[grid * grid, dim], data)
}

/// Splits `x[B, m, w, w]` into `[B, (w/p)^2, m*p*p]` patch vectors,
/// row-major over the patch grid.
pub fn patchify<T: Scalar>(tape: &mut Tape<T>, x: Var, patch: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::Shape(format!("patchify expects [B, m, w, w], got {s:?}")));
    }
    let (b, m, w) = (s[0], s[1], s[2]);
    if patch == 0 || w % patch != 0 {
        return Err(Error::Config(format!("patch size {patch} does not divide window {w}")));
    }
    let g = w / patch;
    let x = tape.reshape(x, &[b, m, g, patch, g, patch])?;
    let x = tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
    tape.reshape(x, &[b, g * g, m * patch * patch])
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(tape: &mut Tape<T>, x: Var, bands: usize, patch: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[2] != bands * patch * patch {
        return Err(Error::Shape(format!("unpatchify got {s:?}")));
    }
    let (b, np) = (s[0], s[1]);
    let g = (np as f64).sqrt().round() as usize;
    if g * g != np {
        return Err(Error::Shape(format!("{np} patches do not form a square grid")));
    }
    let x = tape.reshape(x, &[b, g, g, bands, patch, patch])?;
    let x = tape.permute(x, &[0, 3, 1, 4, 2, 5])?;
    tape.reshape(x, &[b, bands, g * patch, g * patch])
}

/// Linear patch projection plus fixed position table.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos: ParamId,
    pub bands: usize,
    pub window: usize,
    pub patch: usize,
    pub dim: usize,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        bands: usize,
        window: usize,
        patch: usize,
        dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if patch == 0 || window % patch != 0 {
            return Err(Error::Config(format!(
                "patch size {patch} does not divide window {window}"
            )));
        }
        let grid = window / patch;
        let proj = Linear::new(store, &format!("{name}.proj"), bands * patch * patch, dim, true, rng);
        let pos = store.add(format!("{name}.pos"), sincos_position_table(grid, dim)?, false);
        Ok(Self {
            proj,
            pos,
            bands,
            window,
            patch,
            dim,
        })
    }

    pub fn num_patches(&self) -> usize {
        let g = self.window / self.patch;
        g * g
    }

    /// `x[B, m, w, w] -> tokens[B, P, D]` with positions added.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.bands || s[2] != self.window || s[3] != self.window {
            return Err(Error::Shape(format!(
                "patch embed expects [B, {}, {}, {}], got {s:?}",
                self.bands, self.window, self.window
            )));
        }
        let patches = patchify(tape, x, self.patch)?;
        let tokens = self.proj.forward(tape, p, patches)?;
        tape.add(tokens, p[self.pos])
    }
}
