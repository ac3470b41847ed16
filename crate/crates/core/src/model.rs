//! The prunable toy decoder-only transformer.
//!
//! Layout per decoder layer (pre-norm, residual adds):
//!
//! ```text
//! h = rms(x)        ; q,k,v = h·W_Q, h·W_K, h·W_V   (masked by d_QK, d_QK, d_V)
//! x = x + attn(q,k,v)·W_O
//! h = rms(x)        ; m = silu(h·W_G) ⊙ (h·W_U)      (both masked by d_GU)
//! x = x + m·W_D
//! ```
//!
//! Widths of every projection are read from the weight tensors, so the same
//! forward evaluates both the full model and a compacted one whose layers have
//! heterogeneous widths.

use rand_distr::{Distribution, Normal};

use crate::adapters::{project, AdapterVars, Adapters, MaskSource, Mode, Role};
use crate::error::{Error, Result};
use crate::numerics::rng::{stream, Stream};
use crate::numerics::{AttentionShape, Graph, Scalar, Tensor, Var};

pub type Token = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_int: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// N=4, d_h=64, H=4, d_head=16, d_int=176, V=259, S=128.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            d_hidden: 64,
            n_heads: 4,
            d_head: 16,
            d_int: 176,
            vocab: 259,
            max_seq: 128,
            norm_eps: 1e-5,
        }
    }

    /// A 2-layer miniature for fast gradient checks.
    pub fn small() -> Self {
        Self {
            n_layers: 2,
            d_hidden: 16,
            n_heads: 2,
            d_head: 8,
            d_int: 24,
            vocab: 259,
            max_seq: 16,
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers,
            self.d_hidden,
            self.n_heads,
            self.d_head,
            self.d_int,
            self.vocab,
            self.max_seq,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("all model dimensions must be >= 1: {self:?}")));
        }
        if self.d_hidden % self.n_heads != 0 || self.d_head != self.d_hidden / self.n_heads {
            return Err(Error::Config(format!(
                "d_hidden {} must equal n_heads {} × d_head {}",
                self.d_hidden, self.n_heads, self.d_head
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Decisions per layer: `2·d_head + d_int`.
    pub fn decision_width(&self) -> usize {
        2 * self.d_head + self.d_int
    }

    /// Decoder-layer parameters with nothing pruned.
    pub fn total_decoder_params(&self) -> u64 {
        count_remaining(self, &DecisionSet::all_ones(self))
    }
}

/// Binary decisions of one decoder layer; `true` keeps the dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDecisions {
    pub qk: Vec<bool>,
    pub v: Vec<bool>,
    pub gu: Vec<bool>,
}

impl LayerDecisions {
    pub fn get(&self, which: MaskSource) -> &[bool] {
        match which {
            MaskSource::Qk => &self.qk,
            MaskSource::V => &self.v,
            MaskSource::Gu => &self.gu,
        }
    }

    /// Concatenation in `(d_QK, d_V, d_GU)` order.
    pub fn concat(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.qk.len() + self.v.len() + self.gu.len());
        out.extend_from_slice(&self.qk);
        out.extend_from_slice(&self.v);
        out.extend_from_slice(&self.gu);
        out
    }

    pub fn from_concat(bits: &[bool], d_head: usize, d_int: usize) -> Result<Self> {
        if bits.len() != 2 * d_head + d_int {
            return Err(Error::Shape(format!(
                "layer decision length {} != 2·{d_head} + {d_int}",
                bits.len()
            )));
        }
        Ok(Self {
            qk: bits[..d_head].to_vec(),
            v: bits[d_head..2 * d_head].to_vec(),
            gu: bits[2 * d_head..].to_vec(),
        })
    }

    pub fn kept(&self) -> (usize, usize, usize) {
        (popcount(&self.qk), popcount(&self.v), popcount(&self.gu))
    }
}

pub fn popcount(bits: &[bool]) -> usize {
    bits.iter().filter(|&&b| b).count()
}

/// Pruning decisions for every decoder layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionSet {
    pub layers: Vec<LayerDecisions>,
}

impl DecisionSet {
    pub fn filled(config: &ModelConfig, keep: bool) -> Self {
        let layer = LayerDecisions {
            qk: vec![keep; config.d_head],
            v: vec![keep; config.d_head],
            gu: vec![keep; config.d_int],
        };
        Self {
            layers: vec![layer; config.n_layers],
        }
    }

    pub fn all_ones(config: &ModelConfig) -> Self {
        Self::filled(config, true)
    }

    /// Independent Bernoulli(`keep_prob`) bits.
    pub fn random(config: &ModelConfig, keep_prob: f64, rng: &mut impl rand::Rng) -> Self {
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_bool(keep_prob)).collect::<Vec<_>>();
        let layers = (0..config.n_layers)
            .map(|_| LayerDecisions {
                qk: draw(config.d_head),
                v: draw(config.d_head),
                gu: draw(config.d_int),
            })
            .collect();
        Self { layers }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.n_layers {
            return Err(Error::Shape(format!(
                "decision set has {} layers, model has {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        for (n, l) in self.layers.iter().enumerate() {
            if l.qk.len() != config.d_head || l.v.len() != config.d_head || l.gu.len() != config.d_int {
                return Err(Error::Shape(format!(
                    "layer {n}: decision lengths ({}, {}, {}) != ({}, {}, {})",
                    l.qk.len(),
                    l.v.len(),
                    l.gu.len(),
                    config.d_head,
                    config.d_head,
                    config.d_int
                )));
            }
        }
        Ok(())
    }

    /// Constant `1×len` mask rows on the graph.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> MaskVars {
        let row = |g: &mut Graph<T>, bits: &[bool]| {
            g.constant(Tensor::row_vector(
                bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
            ))
        };
        let layers = self
            .layers
            .iter()
            .map(|l| LayerMaskVars {
                qk: row(g, &l.qk),
                v: row(g, &l.v),
                gu: row(g, &l.gu),
            })
            .collect();
        MaskVars { layers }
    }
}

/// Graph rows (`1×d_head`, `1×d_head`, `1×d_int`) holding one layer's
/// decisions. Values may be hard bits or, for relaxations, reals.
#[derive(Debug, Clone, Copy)]
pub struct LayerMaskVars {
    pub qk: Var,
    pub v: Var,
    pub gu: Var,
}

#[derive(Debug, Clone)]
pub struct MaskVars {
    pub layers: Vec<LayerMaskVars>,
}

/// `R(d_all)`: decoder parameters retained under `decisions`. Per layer
/// `2·d_h·H·k_qk + 2·d_h·H·k_v + 3·d_h·k_gu + 2·d_h`.
pub fn count_remaining(config: &ModelConfig, decisions: &DecisionSet) -> u64 {
    let (dh, h) = (config.d_hidden as u64, config.n_heads as u64);
    decisions
        .layers
        .iter()
        .map(|l| {
            let (qk, v, gu) = l.kept();
            2 * dh * h * qk as u64 + 2 * dh * h * v as u64 + 3 * dh * gu as u64 + 2 * dh
        })
        .sum()
}

/// Weights of one decoder layer. `proj` is indexed by [`Role::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub attn_norm: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub proj: Vec<Tensor<T>>,
}

/// Effective per-head and MLP widths of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerWidths {
    pub qk: usize,
    pub v: usize,
    pub gu: usize,
}

impl<T: Scalar> DecoderLayer<T> {
    pub fn get(&self, role: Role) -> &Tensor<T> {
        &self.proj[role.index()]
    }

    pub fn widths(&self, n_heads: usize) -> LayerWidths {
        LayerWidths {
            qk: self.get(Role::Q).cols() / n_heads,
            v: self.get(Role::V).cols() / n_heads,
            gu: self.get(Role::Gate).cols(),
        }
    }

    fn check_shapes(&self, n: usize, config: &ModelConfig) -> Result<()> {
        let (dh, h) = (config.d_hidden, config.n_heads);
        let w = self.widths(h);
        let expect = [
            (Role::Q, [dh, h * w.qk]),
            (Role::K, [dh, h * w.qk]),
            (Role::V, [dh, h * w.v]),
            (Role::O, [h * w.v, dh]),
            (Role::Gate, [dh, w.gu]),
            (Role::Up, [dh, w.gu]),
            (Role::Down, [w.gu, dh]),
        ];
        for (role, shape) in expect {
            if self.get(role).shape() != shape {
                return Err(Error::Shape(format!(
                    "layer {n} {}: shape {:?}, expected {shape:?}",
                    role.name(),
                    self.get(role).shape()
                )));
            }
        }
        for norm in [&self.attn_norm, &self.mlp_norm] {
            if norm.shape() != [1, dh] {
                return Err(Error::Shape(format!("layer {n} norm shape {:?}", norm.shape())));
            }
        }
        Ok(())
    }
}

/// Base (pretrained) weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    /// `V × d_h`
    pub tok_emb: Tensor<T>,
    /// `S × d_h`
    pub pos_emb: Tensor<T>,
    pub layers: Vec<DecoderLayer<T>>,
    pub final_norm: Tensor<T>,
    /// `d_h × V`
    pub unembed: Tensor<T>,
}

/// Graph handles of a bound [`Model`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub unembed: Var,
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub mlp_norm: Var,
    pub proj: Vec<Var>,
}

impl ModelVars {
    /// Same order as [`Model::tensors_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.push(l.attn_norm);
            out.push(l.mlp_norm);
            out.extend_from_slice(&l.proj);
        }
        out.push(self.final_norm);
        out.push(self.unembed);
        out
    }
}

impl<T: Scalar> Model<T> {
    /// Gaussian(0, 0.02) projections and embeddings, unit norm scales.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::Init);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let mut gauss = |r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| T::lit(normal.sample(&mut rng))).collect())
        };
        let (dh, di) = (config.d_hidden, config.d_int);
        let tok_emb = gauss(config.vocab, dh);
        let pos_emb = gauss(config.max_seq, dh);
        let layers = (0..config.n_layers)
            .map(|_| DecoderLayer {
                attn_norm: Tensor::full(1, dh, T::one()),
                mlp_norm: Tensor::full(1, dh, T::one()),
                proj: vec![
                    gauss(dh, dh),
                    gauss(dh, dh),
                    gauss(dh, dh),
                    gauss(dh, dh),
                    gauss(dh, di),
                    gauss(dh, di),
                    gauss(di, dh),
                ],
            })
            .collect();
        let unembed = gauss(dh, config.vocab);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            final_norm: Tensor::full(1, dh, T::one()),
            unembed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        if self.layers.len() != c.n_layers {
            return Err(Error::Shape(format!(
                "{} layers, config says {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        if self.tok_emb.shape() != [c.vocab, c.d_hidden]
            || self.pos_emb.shape() != [c.max_seq, c.d_hidden]
            || self.final_norm.shape() != [1, c.d_hidden]
            || self.unembed.shape() != [c.d_hidden, c.vocab]
        {
            return Err(Error::Shape("embedding/unembedding shapes disagree with config".into()));
        }
        for (n, l) in self.layers.iter().enumerate() {
            l.check_shapes(n, c)?;
        }
        Ok(())
    }

    /// `(rows, cols)` of every projection, for sizing adapters.
    pub fn projection_shapes(&self) -> Vec<[(usize, usize); 7]> {
        self.layers
            .iter()
            .map(|l| {
                let mut s = [(0, 0); 7];
                for role in Role::ALL {
                    let t = l.get(role);
                    s[role.index()] = (t.rows(), t.cols());
                }
                s
            })
            .collect()
    }

    /// Materialized decoder-layer parameter count (norms included).
    pub fn decoder_param_count(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| {
                (l.attn_norm.len() + l.mlp_norm.len() + l.proj.iter().map(Tensor::len).sum::<usize>())
                    as u64
            })
            .sum()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.push(&mut l.attn_norm);
            out.push(&mut l.mlp_norm);
            out.extend(l.proj.iter_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    /// Named tensors for checkpointing.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (n, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{n}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{n}.mlp_norm"), &l.mlp_norm));
            for role in Role::ALL {
                out.push((format!("layers.{n}.{}", role.name()), l.get(role)));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ModelVars {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let tok_emb = leaf(&self.tok_emb);
        let pos_emb = leaf(&self.pos_emb);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                attn_norm: leaf(&l.attn_norm),
                mlp_norm: leaf(&l.mlp_norm),
                proj: l.proj.iter().map(&mut leaf).collect(),
            })
            .collect();
        let final_norm = leaf(&self.final_norm);
        let unembed = leaf(&self.unembed);
        ModelVars {
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            unembed,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| DecoderLayer {
                    attn_norm: l.attn_norm.cast(),
                    mlp_norm: l.mlp_norm.cast(),
                    proj: l.proj.iter().map(Tensor::cast).collect(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            unembed: self.unembed.cast(),
        }
    }
}

/// Equal-length token sequences evaluated together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    seqs: Vec<Vec<Token>>,
}

impl TokenBatch {
    pub fn new(seqs: Vec<Vec<Token>>) -> Result<Self> {
        let Some(first) = seqs.first() else {
            return Err(Error::Input("empty batch".into()));
        };
        let len = first.len();
        if len == 0 || seqs.iter().any(|s| s.len() != len) {
            return Err(Error::Input("batch sequences must be nonempty and of equal length".into()));
        }
        Ok(Self { seqs })
    }

    pub fn single(tokens: Vec<Token>) -> Result<Self> {
        Self::new(vec![tokens])
    }

    pub fn seqs(&self) -> &[Vec<Token>] {
        &self.seqs
    }

    pub fn seq_len(&self) -> usize {
        self.seqs[0].len()
    }

    pub fn rows(&self) -> usize {
        self.seqs.len() * self.seq_len()
    }

    /// Next-token targets per flattened row; the last position of each
    /// sequence has none.
    pub fn next_token_targets(&self) -> Vec<Option<usize>> {
        let l = self.seq_len();
        self.seqs
            .iter()
            .flat_map(|s| (0..l).map(move |t| s.get(t + 1).map(|&x| x as usize)))
            .collect()
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.seq_len() > config.max_seq {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq {}",
                self.seq_len(),
                config.max_seq
            )));
        }
        for s in &self.seqs {
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= config.vocab) {
                return Err(Error::Input(format!("token id {bad} >= vocab {}", config.vocab)));
            }
        }
        Ok(())
    }
}

/// What the forward pass should apply on top of the base weights.
#[derive(Debug, Clone, Copy)]
pub struct ForwardSpec<'a> {
    pub adapters: Option<&'a AdapterVars>,
    pub masks: Option<&'a MaskVars>,
    pub mode: Mode,
}

impl<'a> ForwardSpec<'a> {
    pub fn dense() -> Self {
        Self {
            adapters: None,
            masks: None,
            mode: Mode::Dense,
        }
    }
}

fn nonzero_count<T: Scalar>(t: &Tensor<T>) -> usize {
    t.data().iter().filter(|&&v| v != T::zero()).count()
}

/// Attention score scale for a head of `k` retained query/key dimensions.
/// A fully pruned head has all-zero scores, so any finite scale works.
pub fn attention_scale<T: Scalar>(k: usize) -> T {
    if k == 0 {
        T::one()
    } else {
        T::one() / T::from_count(k).sqrt()
    }
}

/// Logits `[rows × V]` for `batch` recorded on `g`.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    vars: &ModelVars,
    spec: ForwardSpec<'_>,
    batch: &TokenBatch,
) -> Result<Var> {
    let config = &model.config;
    batch.check(config)?;
    let masks = match spec.mode {
        Mode::Dense => None,
        Mode::G | Mode::L => Some(spec.masks.ok_or_else(|| {
            Error::Contract("G/L-mode forward requires a decision set".into())
        })?),
    };
    if let Some(m) = masks {
        if m.layers.len() != model.layers.len() {
            return Err(Error::Shape("mask layer count mismatch".into()));
        }
    }
    let h = config.n_heads;
    let l = batch.seq_len();
    let ids: Vec<usize> = batch.seqs.iter().flatten().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..batch.seqs.len()).flat_map(|_| 0..l).collect();
    let tok = g.gather_rows(vars.tok_emb, &ids);
    let pos = g.gather_rows(vars.pos_emb, &positions);
    let mut x = g.add(tok, pos);
    let eps = T::lit(config.norm_eps);

    for (n, (layer, lv)) in model.layers.iter().zip(&vars.layers).enumerate() {
        let widths = layer.widths(h);
        let (qk_mask, v_mask, gu_mask, k_qk) = match masks {
            Some(m) => {
                let lm = m.layers[n];
                let expect = [(lm.qk, widths.qk), (lm.v, widths.v), (lm.gu, widths.gu)];
                for (var, w) in expect {
                    if g.value(var).shape() != [1, w] {
                        return Err(Error::Shape(format!(
                            "layer {n}: mask shape {:?} does not match width {w}",
                            g.value(var).shape()
                        )));
                    }
                }
                let k = nonzero_count(g.value(lm.qk));
                let qk = g.tile_cols(lm.qk, h);
                let v = g.tile_cols(lm.v, h);
                (Some(qk), Some(v), Some(lm.gu), k)
            }
            None => (None, None, None, widths.qk),
        };

        let adapters = spec.adapters.map(|a| a.layers[n].as_slice());
        let block = BlockInputs {
            proj: &lv.proj,
            adapters,
            mode: spec.mode,
        };
        let hn = g.rms_norm(x, lv.attn_norm, eps);
        let attn_masks = AttnMasks {
            qk: qk_mask,
            v: v_mask,
            k_qk,
        };
        let o = attn_block(g, hn, block, attn_masks, widths, h, l);
        x = g.add(x, o);
        let hn = g.rms_norm(x, lv.mlp_norm, eps);
        let down = mlp_block(g, hn, block, gu_mask);
        x = g.add(x, down);
    }
    let xn = g.rms_norm(x, vars.final_norm, eps);
    Ok(g.matmul(xn, vars.unembed))
}

/// Per-layer projection handles shared by [`attn_block`] and [`mlp_block`].
#[derive(Debug, Clone, Copy)]
pub struct BlockInputs<'a> {
    /// Base weights indexed by [`Role::index`].
    pub proj: &'a [Var],
    /// Adapter `(a, b)` pairs indexed by [`Role::index`].
    pub adapters: Option<&'a [(Var, Var)]>,
    pub mode: Mode,
}

impl BlockInputs<'_> {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var, role: Role, mask: Option<Var>) -> Var {
        let adapter = self.adapters.map(|a| a[role.index()]);
        project(g, x, self.proj[role.index()], adapter, mask, self.mode)
    }
}

/// Attention decision rows, already tiled across heads (`1 × H·d_head`).
#[derive(Debug, Clone, Copy)]
pub struct AttnMasks {
    pub qk: Option<Var>,
    pub v: Option<Var>,
    /// Retained query/key dimensions per head, which sets the score scale.
    pub k_qk: usize,
}

/// Causal multi-head attention of normalized input `x`, projected by `W_O`.
pub fn attn_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    block: BlockInputs<'_>,
    masks: AttnMasks,
    widths: LayerWidths,
    n_heads: usize,
    seq_len: usize,
) -> Var {
    let q = block.apply(g, x, Role::Q, masks.qk);
    let k = block.apply(g, x, Role::K, masks.qk);
    let v = block.apply(g, x, Role::V, masks.v);
    let shape = AttentionShape {
        heads: n_heads,
        qk_dim: widths.qk,
        v_dim: widths.v,
        seq_len,
        causal: true,
    };
    let att = g.attention(q, k, v, shape, attention_scale(masks.k_qk));
    block.apply(g, att, Role::O, None)
}

/// `(silu(x·W_G·D) ⊙ (x·W_U·D))·W_D`.
pub fn mlp_block<T: Scalar>(g: &mut Graph<T>, x: Var, block: BlockInputs<'_>, gu: Option<Var>) -> Var {
    let gate = block.apply(g, x, Role::Gate, gu);
    let up = block.apply(g, x, Role::Up, gu);
    let act = g.silu(gate);
    let m = g.mul(act, up);
    block.apply(g, m, Role::Down, None)
}

/// Mean next-token cross-entropy over every position of every sequence.
pub fn lm_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, batch: &TokenBatch) -> Result<Var> {
    if batch.seq_len() < 2 {
        return Err(Error::Contract("language-model loss needs at least 2 tokens".into()));
    }
    Ok(g.cross_entropy(logits, &batch.next_token_targets()))
}

/// Logits without gradient tracking.
pub fn model_logits<T: Scalar>(
    model: &Model<T>,
    adapters: Option<&Adapters<T>>,
    decisions: Option<&DecisionSet>,
    mode: Mode,
    batch: &TokenBatch,
) -> Result<Tensor<T>> {
    if let Some(d) = decisions {
        d.validate(&model.config)?;
    }
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let avars = adapters.map(|a| a.bind(&mut g, false));
    let mvars = decisions.map(|d| d.bind(&mut g));
    let spec = ForwardSpec {
        adapters: avars.as_ref(),
        masks: mvars.as_ref(),
        mode,
    };
    let out = forward(&mut g, model, &vars, spec, batch)?;
    Ok(g.value(out).clone())
}

/// Loss value without gradient tracking.
pub fn model_loss<T: Scalar>(
    model: &Model<T>,
    adapters: Option<&Adapters<T>>,
    decisions: Option<&DecisionSet>,
    mode: Mode,
    batch: &TokenBatch,
) -> Result<T> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let avars = adapters.map(|a| a.bind(&mut g, false));
    let mvars = decisions.map(|d| d.bind(&mut g));
    let spec = ForwardSpec {
        adapters: avars.as_ref(),
        masks: mvars.as_ref(),
        mode,
    };
    let logits = forward(&mut g, model, &vars, spec, batch)?;
    let loss = lm_loss(&mut g, logits, batch)?;
    Ok(g.value(loss).item())
}

/// Direct softmax-NLL of `logits [L×V]` against `tokens` (length `L`).
pub fn lm_loss_value<T: Scalar>(logits: &Tensor<T>, tokens: &[Token]) -> Result<T> {
    if tokens.len() < 2 {
        return Err(Error::Contract("language-model loss needs at least 2 tokens".into()));
    }
    if logits.rows() != tokens.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} tokens",
            logits.rows(),
            tokens.len()
        )));
    }
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let targets: Vec<Option<usize>> =
        (0..tokens.len()).map(|t| tokens.get(t + 1).map(|&x| x as usize)).collect();
    let loss = g.cross_entropy(l, &targets);
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_counts() {
        let c = ModelConfig::toy();
        c.validate().unwrap();
        assert_eq!(c.decision_width(), 208);
        assert_eq!(c.total_decoder_params(), 201_216);
        let mut d = DecisionSet::all_ones(&c);
        assert_eq!(count_remaining(&c, &d) / 4, 50_304);
        for l in &mut d.layers {
            for b in l.gu.iter_mut().skip(88) {
                *b = false;
            }
        }
        assert_eq!(count_remaining(&c, &d) / 4, 33_408);
    }

    #[test]
    fn llama2_7b_decoder_size() {
        let c = ModelConfig {
            n_layers: 32,
            d_hidden: 4096,
            n_heads: 32,
            d_head: 128,
            d_int: 11008,
            vocab: 32000,
            max_seq: 4096,
            norm_eps: 1e-5,
        };
        let decoder = c.total_decoder_params() as f64;
        assert!((decoder / 1e9 - 6.48).abs() < 0.005, "{decoder}");
        let embeddings = 2.0 * 32000.0 * 4096.0;
        assert!(((decoder + embeddings) / 1e9 - 6.74).abs() < 0.01);
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::toy();
        c.d_head = 15;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.d_int = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn flipping_a_bit_strictly_decreases_remaining() {
        let c = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut d = DecisionSet::random(&c, 0.7, &mut rng);
        let mut r = count_remaining(&c, &d);
        for n in 0..c.n_layers {
            for i in 0..c.d_head {
                if d.layers[n].qk[i] {
                    d.layers[n].qk[i] = false;
                    let r2 = count_remaining(&c, &d);
                    assert!(r2 < r);
                    r = r2;
                }
            }
        }
    }

    #[test]
    fn token_and_batch_validation() {
        let m = Model::<f32>::init(ModelConfig::small(), 1).unwrap();
        let bad = TokenBatch::single(vec![1, 300]).unwrap();
        assert!(matches!(
            model_logits(&m, None, None, Mode::Dense, &bad),
            Err(Error::Input(_))
        ));
        assert!(TokenBatch::new(vec![vec![1, 2], vec![3]]).is_err());
        let one = TokenBatch::single(vec![5]).unwrap();
        assert_eq!(model_logits(&m, None, None, Mode::Dense, &one).unwrap().shape(), [1, 259]);
        assert!(matches!(
            model_loss(&m, None, None, Mode::Dense, &one),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            model_logits(&m, None, None, Mode::G, &one),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        let logits = Tensor::<f64>::zeros(5, 259);
        let loss = lm_loss_value(&logits, &[1, 2, 3, 4, 5]).unwrap();
        assert!((loss - 259f64.ln()).abs() < 1e-12);
        assert!((loss - 5.5568).abs() < 1e-4);
        let mut confident = Tensor::<f64>::zeros(3, 4);
        confident.set(0, 2, 60.0);
        confident.set(1, 1, 60.0);
        assert!(lm_loss_value(&confident, &[0, 2, 1]).unwrap() < 1e-20);
    }
}
