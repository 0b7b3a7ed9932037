use rand::Rng;

use super::params::trunc_normal;
use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Standard deviation for projection weights.
pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    TruncNormal(f64),
    Zeros,
}

impl Init {
    fn make<R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor {
        match self {
            Init::TruncNormal(std) => trunc_normal(shape, std, rng),
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

/// `y = x W + b`, with `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), init.make(&[in_dim, out_dim], rng));
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.in_dim {
            return Err(Error::Shape(format!(
                "linear expects {} input features, got {:?}",
                self.in_dim,
                g.value(x).shape()
            )));
        }
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    /// Multiply-accumulate count for `rows` input rows.
    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.in_dim * self.out_dim) as u64
    }
}

/// Layer norm with learned per-feature scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[1, dim], 1.0)),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[1, dim])),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(n, gamma)?;
        g.add_row(y, beta)
    }
}

/// `x * (1 + scale) + shift`, with row-vector shift and scale.
pub fn modulate(g: &mut Graph<'_>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let s = g.offset(scale, 1.0);
    let y = g.mul_row(x, s)?;
    g.add_row(y, shift)
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs (self-attention passes the same tokens for both).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "hidden dim {dim} not divisible by {heads} heads"
            )));
        }
        let init = Init::TruncNormal(INIT_STD);
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, true, init, rng),
            // A key bias shifts every logit of a query row equally; softmax
            // cancels it, so it is omitted.
            k: Linear::new(ps, &format!("{name}.k"), kv_dim, dim, false, init, rng),
            v: Linear::new(ps, &format!("{name}.v"), kv_dim, dim, true, init, rng),
            out: Linear::new(ps, &format!("{name}.out"), dim, dim, true, init, rng),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(&self, g: &mut Graph<'_>, xq: Var, xkv: Var) -> Result<Var> {
        self.forward_inner(g, xq, xkv, None)
    }

    /// Forward pass that also returns each head's attention matrix.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph<'_>,
        xq: Var,
        xkv: Var,
    ) -> Result<(Var, Vec<Tensor>)> {
        let mut weights = Vec::with_capacity(self.heads);
        let y = self.forward_inner(g, xq, xkv, Some(&mut weights))?;
        Ok((y, weights))
    }

    fn forward_inner(
        &self,
        g: &mut Graph<'_>,
        xq: Var,
        xkv: Var,
        mut weights: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let q = self.q.forward(g, xq)?;
        let k = self.k.forward(g, xkv)?;
        let v = self.v.forward(g, xkv)?;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let logits = g.matmul_t(qh, false, kh, true)?;
            let logits = g.scale(logits, scale);
            let p = g.softmax(logits);
            if let Some(w) = weights.as_deref_mut() {
                w.push(g.value(p).clone());
            }
            heads.push(g.matmul(p, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        self.out.forward(g, merged)
    }
}

/// Two-layer perceptron with a 4x expansion and GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        let init = Init::TruncNormal(INIT_STD);
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, 4 * dim, true, init, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), 4 * dim, dim, true, init, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

#[derive(Debug, Clone)]
pub enum BlockNorm {
    /// Pre-norm with learned affine layer norms (encoder blocks).
    Affine { ln1: LayerNorm, ln2: LayerNorm },
    /// Adaptive layer norm: shift/scale/gate for attention and MLP are
    /// regressed from a conditioning vector (denoiser blocks).
    Modulated { adaln: Linear },
}

/// Pre-norm transformer block: self-attention, optional cross-attention,
/// then MLP, each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub dim: usize,
    pub attn: MultiHeadAttention,
    pub cross: Option<MultiHeadAttention>,
    pub mlp: Mlp,
    pub norm: BlockNorm,
}

impl TransformerBlock {
    pub fn plain<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let ln1 = LayerNorm::new(ps, &format!("{name}.ln1"), dim);
        let attn = MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, dim, heads, rng)?;
        let ln2 = LayerNorm::new(ps, &format!("{name}.ln2"), dim);
        let mlp = Mlp::new(ps, &format!("{name}.mlp"), dim, rng);
        Ok(Self {
            dim,
            attn,
            cross: None,
            mlp,
            norm: BlockNorm::Affine { ln1, ln2 },
        })
    }

    /// Block with adaptive layer-norm modulation from a `dim`-sized
    /// conditioning vector. The modulation regressor starts at zero, so a
    /// fresh block is the identity map.
    pub fn modulated<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        cross_kv_dim: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let attn = MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, dim, heads, rng)?;
        let cross = cross_kv_dim
            .map(|kv| MultiHeadAttention::new(ps, &format!("{name}.cross"), dim, kv, heads, rng))
            .transpose()?;
        let mlp = Mlp::new(ps, &format!("{name}.mlp"), dim, rng);
        let adaln = Linear::new(
            ps,
            &format!("{name}.adaln"),
            dim,
            6 * dim,
            true,
            Init::Zeros,
            rng,
        );
        Ok(Self {
            dim,
            attn,
            cross,
            mlp,
            norm: BlockNorm::Modulated { adaln },
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        cond: Option<Var>,
        context: Option<Var>,
    ) -> Result<Var> {
        g.value(x).ensure_finite("block input")?;
        if g.value(x).cols() != self.dim {
            return Err(Error::Shape(format!(
                "block of width {} got {:?}",
                self.dim,
                g.value(x).shape()
            )));
        }
        match &self.norm {
            BlockNorm::Affine { ln1, ln2 } => {
                let h = ln1.forward(g, x)?;
                let h = self.attn.forward(g, h, h)?;
                let mut x = g.add(x, h)?;
                x = self.cross_step(g, x, context)?;
                let h = ln2.forward(g, x)?;
                let h = self.mlp.forward(g, h)?;
                g.add(x, h)
            }
            BlockNorm::Modulated { adaln } => {
                let cond = cond.ok_or_else(|| {
                    Error::Config("modulated block needs a conditioning vector".into())
                })?;
                if g.value(cond).len() != self.dim {
                    return Err(Error::Shape(format!(
                        "modulation vector has {} values, block expects {}",
                        g.value(cond).len(),
                        self.dim
                    )));
                }
                let c = g.silu(cond);
                let m = adaln.forward(g, c)?;
                let d = self.dim;
                let chunk = |g: &mut Graph<'_>, i: usize| g.slice_cols(m, i * d, d);
                let (shift_a, scale_a, gate_a) = (chunk(g, 0)?, chunk(g, 1)?, chunk(g, 2)?);
                let (shift_m, scale_m, gate_m) = (chunk(g, 3)?, chunk(g, 4)?, chunk(g, 5)?);

                let h = g.layer_norm(x, LN_EPS);
                let h = modulate(g, h, shift_a, scale_a)?;
                let h = self.attn.forward(g, h, h)?;
                let h = g.mul_row(h, gate_a)?;
                let mut x = g.add(x, h)?;
                x = self.cross_step(g, x, context)?;
                let h = g.layer_norm(x, LN_EPS);
                let h = modulate(g, h, shift_m, scale_m)?;
                let h = self.mlp.forward(g, h)?;
                let h = g.mul_row(h, gate_m)?;
                g.add(x, h)
            }
        }
    }

    fn cross_step(&self, g: &mut Graph<'_>, x: Var, context: Option<Var>) -> Result<Var> {
        match (&self.cross, context) {
            (Some(cross), Some(ctx)) => {
                let h = cross.forward(g, x, ctx)?;
                g.add(x, h)
            }
            (Some(_), None) => Err(Error::Config(
                "cross-attention block needs context tokens".into(),
            )),
            (None, _) => Ok(x),
        }
    }
}

/// Sinusoidal timestep features followed by a two-layer MLP.
#[derive(Debug, Clone)]
pub struct TimestepEmbedder {
    pub fc1: Linear,
    pub fc2: Linear,
    pub freq_dim: usize,
}

impl TimestepEmbedder {
    pub const FREQ_DIM: usize = 256;

    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        let init = Init::TruncNormal(INIT_STD);
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), Self::FREQ_DIM, dim, true, init, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), dim, dim, true, init, rng),
            freq_dim: Self::FREQ_DIM,
        }
    }

    pub fn features(t: f64, dim: usize) -> Tensor {
        let half = dim / 2;
        let mut out = vec![0.0; dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out[i] = (t * freq).cos();
            out[half + i] = (t * freq).sin();
        }
        Tensor::new(&[1, dim], out).expect("sized above")
    }

    pub fn forward(&self, g: &mut Graph<'_>, t: f64) -> Result<Var> {
        let f = g.constant(Self::features(t, self.freq_dim));
        let h = self.fc1.forward(g, f)?;
        let h = g.silu(h);
        self.fc2.forward(g, h)
    }
}

/// Learned class-label table with one extra row for the null label.
#[derive(Debug, Clone)]
pub struct LabelEmbedding {
    pub table: ParamId,
    pub classes: usize,
}

impl LabelEmbedding {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        classes: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = ps.add(
            format!("{name}.table"),
            trunc_normal(&[classes + 1, dim], INIT_STD, rng),
        );
        Self { table, classes }
    }

    pub fn null_label(&self) -> usize {
        self.classes
    }

    pub fn forward(&self, g: &mut Graph<'_>, label: usize) -> Result<Var> {
        if label > self.classes {
            return Err(Error::Index(format!(
                "label {label} outside vocabulary of {} (+null)",
                self.classes
            )));
        }
        let t = g.param(self.table);
        g.gather_rows(t, &[label])
    }
}

/// Fixed 2-D sinusoidal embeddings for grid positions `(row, col)`.
/// Half of the features encode the column, half the row.
pub fn sincos_2d(positions: &[(usize, usize)], dim: usize) -> Result<Tensor> {
    if !dim.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "2-D positional embedding needs dim divisible by 4, got {dim}"
        )));
    }
    let quarter = dim / 4;
    let mut out = Tensor::zeros(&[positions.len(), dim]);
    for (i, &(r, c)) in positions.iter().enumerate() {
        let row = out.row_mut(i);
        for (axis, pos) in [(0, c as f64), (1, r as f64)] {
            let base = axis * 2 * quarter;
            for j in 0..quarter {
                let omega = 1.0 / 10000f64.powf(j as f64 / quarter as f64);
                row[base + j] = (pos * omega).sin();
                row[base + quarter + j] = (pos * omega).cos();
            }
        }
    }
    Ok(out)
}
