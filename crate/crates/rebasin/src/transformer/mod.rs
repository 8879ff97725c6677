//! Decoder-only transformer: configuration, parameters, and the pure forward
//! pass used for evaluation.
//!
//! Architecture (pre-norm residual):
//!
//! ```text
//! h   = embed[tokens] + pos[0..T]
//! h  += sum_i  W_o_i · Attn_i(norm_a(h))      (causal self-attention)
//! h  += W_2 · act(W_1 · norm_f(h) + b_1) + b_2
//! ...
//! logits = W_out · norm_final(h)
//! ```
//!
//! Weights follow the `W · x` column convention: a map from the residual
//! stream into a head reads as a `d_k x d_r` matrix, and row-stacked token
//! activations are multiplied as `X · W^T`. Per-layer head counts and widths
//! are taken from the actual tensor shapes, so models whose layers have been
//! widened or re-headed independently still evaluate correctly.

mod checkpoint;
mod tape;

pub use checkpoint::{read_container, write_container, RawTensor, MAGIC};
pub use tape::{TapeHead, TapeLayer, TapeModel, TapeNorm};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;

/// Feed-forward activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => crate::autodiff::gelu(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::ConfigMismatch {
                detail: format!("unknown activation {other:?} (expected relu or gelu)"),
            }),
        }
    }
}

/// Normalization kind used by every norm in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

impl NormKind {
    pub fn name(self) -> &'static str {
        match self {
            NormKind::LayerNorm => "layernorm",
            NormKind::RmsNorm => "rmsnorm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "layernorm" => Ok(NormKind::LayerNorm),
            "rmsnorm" => Ok(NormKind::RmsNorm),
            other => Err(Error::ConfigMismatch {
                detail: format!("unknown norm {other:?} (expected layernorm or rmsnorm)"),
            }),
        }
    }
}

/// Model hyperparameters. `heads`, `d_k`, and `d_h` are per-layer defaults;
/// the tensors of a loaded or transformed model may deviate layer by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub vocab: usize,
    pub max_seq: usize,
    pub d_r: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_h: usize,
    pub activation: Activation,
    pub norm: NormKind,
    pub eps: f64,
}

impl TransformerConfig {
    /// Fresh config with `d_k` derived as `d_r / heads` and `d_h = 4 * d_r`.
    pub fn new(vocab: usize, max_seq: usize, d_r: usize, layers: usize, heads: usize) -> Result<Self> {
        if vocab == 0 || max_seq == 0 || d_r == 0 || layers == 0 || heads == 0 {
            return Err(Error::ConfigMismatch {
                detail: "config dimensions must be positive".into(),
            });
        }
        if d_r % heads != 0 {
            return Err(Error::ConfigMismatch {
                detail: format!("residual width {d_r} not divisible by {heads} heads"),
            });
        }
        Ok(Self {
            vocab,
            max_seq,
            d_r,
            layers,
            heads,
            d_k: d_r / heads,
            d_h: 4 * d_r,
            activation: Activation::Gelu,
            norm: NormKind::RmsNorm,
            eps: 1e-5,
        })
    }

    pub fn with_d_h(mut self, d_h: usize) -> Self {
        self.d_h = d_h;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_norm(mut self, norm: NormKind) -> Self {
        self.norm = norm;
        self
    }
}

/// Per-norm affine parameters, stored as `1 x d_r` rows. The offset lives in
/// the normalized (post-core) space: `out = scale .* core(x) + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub scale: Matrix,
    pub offset: Matrix,
}

impl NormParams {
    pub fn unit(d: usize) -> Self {
        Self {
            scale: Matrix::from_fn(1, d, |_, _| 1.0),
            offset: Matrix::zeros(1, d),
        }
    }
}

/// One attention head. `w_q`, `w_k`, `w_v` are `d_k x d_r`; `w_o` is
/// `d_r x d_k` and maps the head's output back into the residual stream.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub norm_attn: NormParams,
    pub heads: Vec<HeadParams>,
    pub norm_ffn: NormParams,
    /// `d_h x d_r`.
    pub w_1: Matrix,
    /// `1 x d_h`.
    pub b_1: Matrix,
    /// `d_r x d_h`.
    pub w_2: Matrix,
    /// `1 x d_r`.
    pub b_2: Matrix,
}

impl LayerParams {
    /// Per-head width, from the actual tensors.
    pub fn d_k(&self) -> usize {
        self.heads[0].w_q.rows()
    }

    /// Hidden width, from the actual tensors.
    pub fn d_h(&self) -> usize {
        self.w_1.rows()
    }
}

/// Full parameter set. Embeddings are stored row-per-token (`vocab x d_r`,
/// `max_seq x d_r`); the unembedding `w_out` is `vocab x d_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub config: TransformerConfig,
    pub embed: Matrix,
    pub pos: Matrix,
    pub layers: Vec<LayerParams>,
    pub norm_final: NormParams,
    pub w_out: Matrix,
}

/// A batch of same-role sequences. `mask`, when present, weights each target
/// position's contribution to loss and accuracy (zero excludes it).
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub mask: Option<Vec<Vec<f64>>>,
}

impl Batch {
    pub fn new(tokens: Vec<Vec<usize>>, targets: Vec<Vec<usize>>) -> Result<Self> {
        Self::with_mask(tokens, targets, None)
    }

    pub fn with_mask(
        tokens: Vec<Vec<usize>>,
        targets: Vec<Vec<usize>>,
        mask: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput {
                context: "Batch::new".into(),
            });
        }
        if tokens.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "Batch::new",
                expected: format!("{} target rows", tokens.len()),
                got: format!("{}", targets.len()),
            });
        }
        for (t, tg) in tokens.iter().zip(&targets) {
            if t.len() != tg.len() || t.is_empty() {
                return Err(Error::ShapeMismatch {
                    op: "Batch::new",
                    expected: "equal nonempty token/target lengths".into(),
                    got: format!("{} vs {}", t.len(), tg.len()),
                });
            }
        }
        if let Some(m) = &mask {
            if m.len() != tokens.len() || m.iter().zip(&tokens).any(|(a, b)| a.len() != b.len()) {
                return Err(Error::ShapeMismatch {
                    op: "Batch::new",
                    expected: "mask congruent with tokens".into(),
                    got: "ragged mask".into(),
                });
            }
            if m.iter().flatten().any(|&w| !w.is_finite() || w < 0.0) {
                return Err(Error::NonFinite {
                    context: "Batch::new: mask weights must be finite and >= 0".into(),
                });
            }
        }
        Ok(Self {
            tokens,
            targets,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Weight of position `j` in sequence `i`.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        match &self.mask {
            Some(m) => m[i][j],
            None => 1.0,
        }
    }

    /// View of a sub-range of sequences.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::EmptyInput {
                context: format!("Batch::slice [{start},{end})"),
            });
        }
        Ok(Self {
            tokens: self.tokens[start..end].to_vec(),
            targets: self.targets[start..end].to_vec(),
            mask: self.mask.as_ref().map(|m| m[start..end].to_vec()),
        })
    }
}

/// Loss and accuracy over a batch, weighted by the batch mask.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    /// Total mask weight the metrics are averaged over.
    pub weight: f64,
}

/// Per-sequence intermediate activations from the pure forward pass.
pub struct ForwardTrace {
    /// Normalized attention input per layer (`T x d_r`).
    pub attn_input: Vec<Matrix>,
    /// Attention pattern per layer per head (`T x T`).
    pub attn_patterns: Vec<Vec<Matrix>>,
    /// Post-activation FFN hidden state per layer (`T x d_h`).
    pub ffn_hidden: Vec<Matrix>,
    /// Residual stream after each layer (`T x d_r`).
    pub residual: Vec<Matrix>,
    /// Final-norm output (`T x d_r`).
    pub final_normed: Matrix,
    pub logits: Matrix,
}

impl TransformerParams {
    /// Seeded initialization: Xavier-style normal weights, `N(0, 0.02)`
    /// embeddings, unit norms, zero biases. Draw order is fixed so equal
    /// seeds give equal parameters.
    pub fn init(config: &TransformerConfig, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        let xavier = |r: &mut rand_chacha::ChaCha20Rng, rows: usize, cols: usize| {
            let std = (2.0 / (rows + cols) as f64).sqrt();
            rng::normal_matrix(r, rows, cols, std)
        };
        let embed = rng::normal_matrix(&mut r, config.vocab, config.d_r, 0.02);
        let pos = rng::normal_matrix(&mut r, config.max_seq, config.d_r, 0.02);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let mut heads = Vec::with_capacity(config.heads);
            for _ in 0..config.heads {
                heads.push(HeadParams {
                    w_q: xavier(&mut r, config.d_k, config.d_r),
                    w_k: xavier(&mut r, config.d_k, config.d_r),
                    w_v: xavier(&mut r, config.d_k, config.d_r),
                    w_o: xavier(&mut r, config.d_r, config.d_k),
                });
            }
            layers.push(LayerParams {
                norm_attn: NormParams::unit(config.d_r),
                heads,
                norm_ffn: NormParams::unit(config.d_r),
                w_1: xavier(&mut r, config.d_h, config.d_r),
                b_1: Matrix::zeros(1, config.d_h),
                w_2: xavier(&mut r, config.d_r, config.d_h),
                b_2: Matrix::zeros(1, config.d_r),
            });
        }
        let norm_final = NormParams::unit(config.d_r);
        let w_out = xavier(&mut r, config.vocab, config.d_r);
        let params = Self {
            config: config.clone(),
            embed,
            pos,
            layers,
            norm_final,
            w_out,
        };
        params.validate()?;
        Ok(params)
    }

    /// Checks internal shape consistency (tensors against each other and the
    /// config's vocab / sequence / residual dimensions).
    pub fn validate(&self) -> Result<()> {
        let d_r = self.config.d_r;
        let want = |ok: bool, what: &str, got: (usize, usize)| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::ShapeMismatch {
                    op: "TransformerParams::validate",
                    expected: what.to_string(),
                    got: format!("{}x{}", got.0, got.1),
                })
            }
        };
        want(
            self.embed.dims() == (self.config.vocab, d_r),
            "embed vocab x d_r",
            self.embed.dims(),
        )?;
        want(
            self.pos.dims() == (self.config.max_seq, d_r),
            "pos max_seq x d_r",
            self.pos.dims(),
        )?;
        if self.layers.is_empty() {
            return Err(Error::ConfigMismatch {
                detail: "model must have at least one layer".into(),
            });
        }
        if self.layers.len() != self.config.layers {
            return Err(Error::ConfigMismatch {
                detail: format!(
                    "config says {} layers, params have {}",
                    self.config.layers,
                    self.layers.len()
                ),
            });
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.heads.is_empty() {
                return Err(Error::ConfigMismatch {
                    detail: format!("layer {l} has no heads"),
                });
            }
            let d_k = layer.heads[0].w_q.rows();
            for (h, head) in layer.heads.iter().enumerate() {
                let ctx = format!("layer {l} head {h}");
                want(head.w_q.dims() == (d_k, d_r), &format!("{ctx} w_q d_k x d_r"), head.w_q.dims())?;
                want(head.w_k.dims() == (d_k, d_r), &format!("{ctx} w_k d_k x d_r"), head.w_k.dims())?;
                want(head.w_v.dims() == (d_k, d_r), &format!("{ctx} w_v d_k x d_r"), head.w_v.dims())?;
                want(head.w_o.dims() == (d_r, d_k), &format!("{ctx} w_o d_r x d_k"), head.w_o.dims())?;
            }
            let d_h = layer.w_1.rows();
            want(layer.w_1.dims() == (d_h, d_r), "w_1 d_h x d_r", layer.w_1.dims())?;
            want(layer.b_1.dims() == (1, d_h), "b_1 1 x d_h", layer.b_1.dims())?;
            want(layer.w_2.dims() == (d_r, d_h), "w_2 d_r x d_h", layer.w_2.dims())?;
            want(layer.b_2.dims() == (1, d_r), "b_2 1 x d_r", layer.b_2.dims())?;
            for norm in [&layer.norm_attn, &layer.norm_ffn] {
                want(norm.scale.dims() == (1, d_r), "norm scale 1 x d_r", norm.scale.dims())?;
                want(norm.offset.dims() == (1, d_r), "norm offset 1 x d_r", norm.offset.dims())?;
            }
        }
        want(
            self.norm_final.scale.dims() == (1, d_r),
            "final norm scale 1 x d_r",
            self.norm_final.scale.dims(),
        )?;
        want(
            self.norm_final.offset.dims() == (1, d_r),
            "final norm offset 1 x d_r",
            self.norm_final.offset.dims(),
        )?;
        want(
            self.w_out.dims() == (self.config.vocab, d_r),
            "w_out vocab x d_r",
            self.w_out.dims(),
        )?;
        Ok(())
    }

    /// All tensors with their canonical checkpoint names, in a fixed order.
    pub fn tensor_views(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("embed".into(), &self.embed),
            ("pos".into(), &self.pos),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.norm_attn.scale"), &layer.norm_attn.scale));
            out.push((format!("layer{l}.norm_attn.offset"), &layer.norm_attn.offset));
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer{l}.head{h}.wq"), &head.w_q));
                out.push((format!("layer{l}.head{h}.wk"), &head.w_k));
                out.push((format!("layer{l}.head{h}.wv"), &head.w_v));
                out.push((format!("layer{l}.head{h}.wo"), &head.w_o));
            }
            out.push((format!("layer{l}.norm_ffn.scale"), &layer.norm_ffn.scale));
            out.push((format!("layer{l}.norm_ffn.offset"), &layer.norm_ffn.offset));
            out.push((format!("layer{l}.w1"), &layer.w_1));
            out.push((format!("layer{l}.b1"), &layer.b_1));
            out.push((format!("layer{l}.w2"), &layer.w_2));
            out.push((format!("layer{l}.b2"), &layer.b_2));
        }
        out.push(("norm_final.scale".into(), &self.norm_final.scale));
        out.push(("norm_final.offset".into(), &self.norm_final.offset));
        out.push(("w_out".into(), &self.w_out));
        out
    }

    /// Mutable views in the same order as [`Self::tensor_views`].
    pub fn tensor_views_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("embed".into(), &mut self.embed),
            ("pos".into(), &mut self.pos),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.norm_attn.scale"), &mut layer.norm_attn.scale));
            out.push((format!("layer{l}.norm_attn.offset"), &mut layer.norm_attn.offset));
            for (h, head) in layer.heads.iter_mut().enumerate() {
                out.push((format!("layer{l}.head{h}.wq"), &mut head.w_q));
                out.push((format!("layer{l}.head{h}.wk"), &mut head.w_k));
                out.push((format!("layer{l}.head{h}.wv"), &mut head.w_v));
                out.push((format!("layer{l}.head{h}.wo"), &mut head.w_o));
            }
            out.push((format!("layer{l}.norm_ffn.scale"), &mut layer.norm_ffn.scale));
            out.push((format!("layer{l}.norm_ffn.offset"), &mut layer.norm_ffn.offset));
            out.push((format!("layer{l}.w1"), &mut layer.w_1));
            out.push((format!("layer{l}.b1"), &mut layer.b_1));
            out.push((format!("layer{l}.w2"), &mut layer.w_2));
            out.push((format!("layer{l}.b2"), &mut layer.b_2));
        }
        out.push(("norm_final.scale".into(), &mut self.norm_final.scale));
        out.push(("norm_final.offset".into(), &mut self.norm_final.offset));
        out.push(("w_out".into(), &mut self.w_out));
        out
    }

    /// True when two models have identical architecture (config and every
    /// tensor shape), i.e. their parameters can be combined entrywise.
    pub fn same_shape(&self, other: &Self) -> bool {
        if self.config != other.config {
            return false;
        }
        let a = self.tensor_views();
        let b = other.tensor_views();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((na, ta), (nb, tb))| na == nb && ta.dims() == tb.dims())
    }

    /// Entrywise combination of two same-shaped models.
    pub fn zip_tensors(
        &self,
        other: &Self,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::ConfigMismatch {
                detail: "zip_tensors: models have different architectures".into(),
            });
        }
        let mut out = self.clone();
        for ((_, dst), (_, src)) in out.tensor_views_mut().into_iter().zip(other.tensor_views()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = f(*d, *s);
            }
        }
        Ok(out)
    }

    /// Applies a norm (core, then affine) to row-stacked activations.
    fn apply_norm(&self, norm: &NormParams, x: &Matrix) -> Matrix {
        let (t, d) = x.dims();
        let n = d as f64;
        let eps = self.config.eps;
        let mut out = Matrix::zeros(t, d);
        for i in 0..t {
            let row = x.row(i);
            match self.config.norm {
                NormKind::LayerNorm => {
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    for j in 0..d {
                        let core = (row[j] - mean) * inv;
                        out.set(i, j, norm.scale.get(0, j) * core + norm.offset.get(0, j));
                    }
                }
                NormKind::RmsNorm => {
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / n;
                    let inv = 1.0 / (ms + eps).sqrt();
                    for j in 0..d {
                        let core = row[j] * inv;
                        out.set(i, j, norm.scale.get(0, j) * core + norm.offset.get(0, j));
                    }
                }
            }
        }
        out
    }

    /// Pure forward pass over one sequence, returning logits (`T x vocab`).
    pub fn forward(&self, tokens: &[usize]) -> Result<Matrix> {
        Ok(self.forward_trace(tokens)?.logits)
    }

    /// Pure forward pass retaining per-layer activations.
    pub fn forward_trace(&self, tokens: &[usize]) -> Result<ForwardTrace> {
        let t = tokens.len();
        if t == 0 {
            return Err(Error::EmptyInput {
                context: "forward: empty sequence".into(),
            });
        }
        if t > self.config.max_seq {
            return Err(Error::ConfigMismatch {
                detail: format!("sequence length {t} exceeds max_seq {}", self.config.max_seq),
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&tk| tk >= self.config.vocab) {
            return Err(Error::ConfigMismatch {
                detail: format!("token {bad} out of vocab {}", self.config.vocab),
            });
        }
        let d_r = self.config.d_r;
        let mut h = Matrix::from_fn(t, d_r, |i, j| {
            self.embed.get(tokens[i], j) + self.pos.get(i, j)
        });

        let mut trace = ForwardTrace {
            attn_input: Vec::with_capacity(self.layers.len()),
            attn_patterns: Vec::with_capacity(self.layers.len()),
            ffn_hidden: Vec::with_capacity(self.layers.len()),
            residual: Vec::with_capacity(self.layers.len()),
            final_normed: Matrix::zeros(0, 0),
            logits: Matrix::zeros(0, 0),
        };

        for layer in &self.layers {
            let z = self.apply_norm(&layer.norm_attn, &h);
            let d_k = layer.d_k();
            let scale = 1.0 / (d_k as f64).sqrt();
            let mut patterns = Vec::with_capacity(layer.heads.len());
            let mut attn_out = Matrix::zeros(t, d_r);
            for head in &layer.heads {
                let q = z.matmul_transb(&head.w_q)?;
                let k = z.matmul_transb(&head.w_k)?;
                let v = z.matmul_transb(&head.w_v)?;
                let mut scores = q.matmul_transb(&k)?.scaled(scale);
                for i in 0..t {
                    for j in (i + 1)..t {
                        scores.set(i, j, -1e30);
                    }
                }
                let a = row_softmax(&scores);
                let ctx = a.matmul(&v)?;
                let proj = ctx.matmul_transb(&head.w_o)?;
                attn_out = attn_out.add(&proj)?;
                patterns.push(a);
            }
            h = h.add(&attn_out)?;
            trace.attn_input.push(z);
            trace.attn_patterns.push(patterns);

            let z2 = self.apply_norm(&layer.norm_ffn, &h);
            let mut hidden = z2.matmul_transb(&layer.w_1)?;
            for i in 0..t {
                for j in 0..hidden.cols() {
                    let pre = hidden.get(i, j) + layer.b_1.get(0, j);
                    hidden.set(i, j, self.config.activation.apply_scalar(pre));
                }
            }
            let mut ffn_out = hidden.matmul_transb(&layer.w_2)?;
            for i in 0..t {
                for j in 0..d_r {
                    ffn_out.set(i, j, ffn_out.get(i, j) + layer.b_2.get(0, j));
                }
            }
            h = h.add(&ffn_out)?;
            trace.ffn_hidden.push(hidden);
            trace.residual.push(h.clone());
        }

        trace.final_normed = self.apply_norm(&self.norm_final, &h);
        trace.logits = trace.final_normed.matmul_transb(&self.w_out)?;
        Ok(trace)
    }

    /// Masked mean loss and accuracy over a batch (pure forward).
    pub fn eval_batch(&self, batch: &Batch) -> Result<EvalMetrics> {
        let mut total_w = 0.0;
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        for (s, tokens) in batch.tokens.iter().enumerate() {
            let logits = self.forward(tokens)?;
            for (j, &target) in batch.targets[s].iter().enumerate() {
                let w = batch.weight(s, j);
                if w == 0.0 {
                    continue;
                }
                if target >= self.config.vocab {
                    return Err(Error::ConfigMismatch {
                        detail: format!("target {target} out of vocab {}", self.config.vocab),
                    });
                }
                let row = logits.row(j);
                let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                loss_sum += w * (lse - row[target]);
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(k, _)| k)
                    .unwrap();
                if argmax == target {
                    acc_sum += w;
                }
                total_w += w;
            }
        }
        if total_w == 0.0 {
            return Err(Error::EmptyInput {
                context: "eval_batch: all positions masked out".into(),
            });
        }
        Ok(EvalMetrics {
            loss: loss_sum / total_w,
            accuracy: acc_sum / total_w,
            weight: total_w,
        })
    }
}

fn row_softmax(x: &Matrix) -> Matrix {
    let (m, n) = x.dims();
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let row = x.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out.set(i, j, e);
            denom += e;
        }
        for j in 0..n {
            out.set(i, j, out.get(i, j) / denom);
        }
    }
    out
}

#[cfg(test)]
mod tests;
