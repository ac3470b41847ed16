//! The trainable pruning-decision generator.
//!
//! The generator has no external input. A frozen `N × 64` matrix with
//! orthonormal rows (one row per decoder layer) passes through two encoder
//! blocks and a final layer norm; a separate affine head per layer then
//! produces `2·d_head + d_int` soft logits. Decisions are
//! `round(sigmoid((d_soft + g + b) / T))` with a straight-through rounding,
//! Gumbel noise `g` and offset `b`.
//!
//! Heads start at zero, so `sigmoid(b / T) = sigmoid(7.5) > 0.5` and the
//! first deterministic emission keeps everything.

use rand::distributions::Open01;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::model::{DecisionSet, LayerDecisions, LayerMaskVars, MaskVars, ModelConfig};
use crate::numerics::rng::{stream, Stream};
use crate::numerics::{graph, AttentionShape, Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub blocks: usize,
    pub temperature: f64,
    pub offset: f64,
    pub layer_norm_eps: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            ff_width: 256,
            blocks: 2,
            temperature: 0.4,
            offset: 3.0,
            layer_norm_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ff1: Tensor<T>,
    pub ff1_b: Tensor<T>,
    pub ff_ln_g: Tensor<T>,
    pub ff_ln_b: Tensor<T>,
    pub ff2: Tensor<T>,
    pub ff2_b: Tensor<T>,
}

impl<T> EncoderBlock<T> {
    fn tensors(&self) -> [&Tensor<T>; 14] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.ff1, &self.ff1_b, &self.ff_ln_g, &self.ff_ln_b, &self.ff2, &self.ff2_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 14] {
        [
            &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk, &mut self.wv, &mut self.bv,
            &mut self.wo, &mut self.bo, &mut self.ff1, &mut self.ff1_b, &mut self.ff_ln_g,
            &mut self.ff_ln_b, &mut self.ff2, &mut self.ff2_b,
        ]
    }
}

/// One affine decision head `64 → 2·d_head + d_int`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionHead<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

/// Weights `M` of the generator plus its frozen input.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorState<T> {
    pub config: GeneratorConfig,
    pub d_head: usize,
    pub d_int: usize,
    /// `N × width`, orthonormal rows, never optimized.
    pub input: Tensor<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub final_ln_g: Tensor<T>,
    pub final_ln_b: Tensor<T>,
    pub heads: Vec<DecisionHead<T>>,
}

/// How Gumbel noise enters an emission.
pub enum Emission<'a, R: Rng> {
    /// `g` drawn per element from the stream.
    Sampled(&'a mut R),
    /// `g = 0`.
    Deterministic,
}

/// Whether the final rounding is applied (straight-through) or skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounding {
    Ste,
    Relaxed,
}

/// `sigmoid((d_soft + g + b) / T)`.
pub fn gumbel_sigmoid(d_soft: f64, g: f64, offset: f64, temperature: f64) -> f64 {
    graph::sigmoid((d_soft + g + offset) / temperature)
}

/// Forward value of the straight-through rounding.
pub fn ste_round(soft: f64) -> bool {
    soft >= 0.5
}

/// `−ln(−ln u)` for `u ~ Uniform(0, 1)`.
pub fn sample_gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.sample(Open01);
    -(-u.ln()).ln()
}

/// Gram–Schmidt on Gaussian rows; `rows <= cols`.
fn orthonormal_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Tensor<f64>> {
    if rows > cols {
        return Err(Error::Config(format!(
            "generator width {cols} cannot hold {rows} orthonormal rows"
        )));
    }
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| normal.sample(rng)).collect();
        for _ in 0..2 {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            out.push(v);
        }
    }
    Ok(Tensor::from_rows(&out))
}

impl<T: Scalar> GeneratorState<T> {
    pub fn new(model: &ModelConfig, config: GeneratorConfig, seed: u64) -> Result<Self> {
        if config.width % config.heads != 0 {
            return Err(Error::Config("generator width must divide into heads".into()));
        }
        if !(config.temperature > 0.0) {
            return Err(Error::Config("generator temperature must be positive".into()));
        }
        let mut rng = stream(seed, Stream::GeneratorInit);
        let input = orthonormal_rows(model.n_layers, config.width, &mut rng)?.cast();
        let w = config.width;
        let mut linear = |fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            Tensor::matrix(
                fan_in,
                fan_out,
                (0..fan_in * fan_out).map(|_| T::lit(dist.sample(&mut rng))).collect(),
            )
        };
        let blocks = (0..config.blocks)
            .map(|_| EncoderBlock {
                wq: linear(w, w),
                bq: Tensor::zeros(1, w),
                wk: linear(w, w),
                bk: Tensor::zeros(1, w),
                wv: linear(w, w),
                bv: Tensor::zeros(1, w),
                wo: linear(w, w),
                bo: Tensor::zeros(1, w),
                ff1: linear(w, config.ff_width),
                ff1_b: Tensor::zeros(1, config.ff_width),
                ff_ln_g: Tensor::full(1, config.ff_width, T::one()),
                ff_ln_b: Tensor::zeros(1, config.ff_width),
                ff2: linear(config.ff_width, w),
                ff2_b: Tensor::zeros(1, w),
            })
            .collect();
        let width = model.decision_width();
        let heads = (0..model.n_layers)
            .map(|_| DecisionHead {
                w: Tensor::zeros(w, width),
                b: Tensor::zeros(1, width),
            })
            .collect();
        Ok(Self {
            config,
            d_head: model.d_head,
            d_int: model.d_int,
            input,
            blocks,
            final_ln_g: Tensor::full(1, w, T::one()),
            final_ln_b: Tensor::zeros(1, w),
            heads,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.heads.len()
    }

    pub fn decision_width(&self) -> usize {
        2 * self.d_head + self.d_int
    }

    /// Every trainable tensor of `M` (the frozen input excluded).
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.blocks.iter().flat_map(|b| b.tensors()).collect();
        out.push(&self.final_ln_g);
        out.push(&self.final_ln_b);
        for h in &self.heads {
            out.push(&h.w);
            out.push(&h.b);
        }
        out
    }

    /// Same order as [`GeneratorState::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_ln_g);
        out.push(&mut self.final_ln_b);
        for h in &mut self.heads {
            out.push(&mut h.w);
            out.push(&mut h.b);
        }
        out
    }

    /// Binds the frozen input as a constant and `M` as trainable (or constant).
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> GeneratorVars {
        let input = g.constant(self.input.clone());
        let params = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        GeneratorVars { input, params }
    }

    /// Soft logits, one `1 × (2·d_head + d_int)` row per decoder layer.
    pub fn soft_logits_graph(&self, g: &mut Graph<T>, vars: &GeneratorVars) -> Vec<Var> {
        let c = &self.config;
        let eps = T::lit(c.layer_norm_eps);
        let n = self.n_layers();
        let mut x = vars.input;
        let mut p = vars.params.iter().copied();
        let mut next = || p.next().expect("generator parameter count");
        let head_dim = c.width / c.heads;
        let shape = AttentionShape {
            heads: c.heads,
            qk_dim: head_dim,
            v_dim: head_dim,
            seq_len: n,
            causal: false,
        };
        let scale = T::one() / T::from_count(head_dim).sqrt();
        for _ in 0..self.blocks.len() {
            let (wq, bq, wk, bk, wv, bv, wo, bo) =
                (next(), next(), next(), next(), next(), next(), next(), next());
            let (f1, f1b, lg, lb, f2, f2b) = (next(), next(), next(), next(), next(), next());
            let affine = |g: &mut Graph<T>, x: Var, w: Var, b: Var| {
                let y = g.matmul(x, w);
                g.add_row(y, b)
            };
            let q = affine(g, x, wq, bq);
            let k = affine(g, x, wk, bk);
            let v = affine(g, x, wv, bv);
            let att = g.attention(q, k, v, shape, scale);
            let o = affine(g, att, wo, bo);
            x = g.add(x, o);
            let h = affine(g, x, f1, f1b);
            let h = g.relu(h);
            let h = g.layer_norm(h, lg, lb, eps);
            let h = affine(g, h, f2, f2b);
            x = g.add(x, h);
        }
        let (lg, lb) = (next(), next());
        let x = g.layer_norm(x, lg, lb, eps);
        (0..n)
            .map(|layer| {
                let (w, b) = (next(), next());
                let row = g.slice_rows(x, layer, 1);
                let y = g.matmul(row, w);
                g.add_row(y, b)
            })
            .collect()
    }

    /// Full decision pipeline on the graph. `noise[n]` is the Gumbel row for
    /// layer `n` (`None` for `g = 0`). Returns the per-layer mask rows and the
    /// concatenated decision row of each layer.
    pub fn decisions_graph(
        &self,
        g: &mut Graph<T>,
        vars: &GeneratorVars,
        noise: Option<&[Tensor<T>]>,
        rounding: Rounding,
    ) -> (MaskVars, Vec<Var>) {
        let logits = self.soft_logits_graph(g, vars);
        self.decisions_from_logits(g, &logits, noise, rounding)
    }

    /// Gumbel-Sigmoid and rounding applied to rows from
    /// [`GeneratorState::soft_logits_graph`].
    pub fn decisions_from_logits(
        &self,
        g: &mut Graph<T>,
        logits: &[Var],
        noise: Option<&[Tensor<T>]>,
        rounding: Rounding,
    ) -> (MaskVars, Vec<Var>) {
        let inv_t = T::lit(1.0 / self.config.temperature);
        let offset = T::lit(self.config.offset);
        let mut layers = Vec::with_capacity(logits.len());
        let mut rows = Vec::with_capacity(logits.len());
        for (n, &z) in logits.iter().enumerate() {
            let z = match noise {
                Some(nz) => {
                    let gv = g.constant(nz[n].clone());
                    g.add(z, gv)
                }
                None => z,
            };
            let z = g.add_scalar(z, offset);
            let z = g.scale(z, inv_t);
            let soft = g.sigmoid(z);
            let d = match rounding {
                Rounding::Ste => g.ste_round(soft),
                Rounding::Relaxed => soft,
            };
            layers.push(LayerMaskVars {
                qk: g.slice_cols(d, 0, self.d_head),
                v: g.slice_cols(d, self.d_head, self.d_head),
                gu: g.slice_cols(d, 2 * self.d_head, self.d_int),
            });
            rows.push(d);
        }
        (MaskVars { layers }, rows)
    }

    /// One Gumbel row per layer, drawn row-major from `rng`.
    pub fn draw_noise(&self, rng: &mut impl Rng) -> Vec<Tensor<T>> {
        let w = self.decision_width();
        (0..self.n_layers())
            .map(|_| Tensor::row_vector((0..w).map(|_| T::lit(sample_gumbel(rng))).collect()))
            .collect()
    }

    /// `N × (2·d_head + d_int)` soft logits.
    pub fn soft_logits(&self) -> Tensor<T> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let rows = self.soft_logits_graph(&mut g, &vars);
        let w = self.decision_width();
        let mut data = Vec::with_capacity(rows.len() * w);
        for r in rows {
            data.extend_from_slice(g.value(r).data());
        }
        Tensor::matrix(self.n_layers(), w, data)
    }

    /// `d_all = G(M)`.
    pub fn emit<R: Rng>(&self, emission: Emission<'_, R>) -> DecisionSet {
        let noise = match emission {
            Emission::Sampled(rng) => Some(self.draw_noise(rng)),
            Emission::Deterministic => None,
        };
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let (_, rows) = self.decisions_graph(&mut g, &vars, noise.as_deref(), Rounding::Ste);
        let layers = rows
            .into_iter()
            .map(|r| {
                let bits: Vec<bool> = g.value(r).data().iter().map(|&v| v == T::one()).collect();
                LayerDecisions::from_concat(&bits, self.d_head, self.d_int).expect("generator width")
            })
            .collect();
        DecisionSet { layers }
    }

    pub fn emit_deterministic(&self) -> DecisionSet {
        self.emit::<rand_chacha::ChaCha8Rng>(Emission::Deterministic)
    }
}

/// Graph handles of a bound generator: the frozen input and `M` in
/// [`GeneratorState::tensors`] order.
#[derive(Debug, Clone)]
pub struct GeneratorVars {
    pub input: Var,
    pub params: Vec<Var>,
}

const HEADER: &str = "atp-decisions v1";

impl DecisionSet {
    /// Text form: a header line then one `0`/`1` line per layer in
    /// `(d_QK, d_V, d_GU)` order.
    pub fn to_text(&self) -> String {
        let (d_head, d_int) = self
            .layers
            .first()
            .map_or((0, 0), |l| (l.qk.len(), l.gu.len()));
        let mut out = format!("{HEADER} N={} dhead={d_head} dint={d_int}\n", self.layers.len());
        for l in &self.layers {
            out.extend(l.concat().iter().map(|&b| if b { '1' } else { '0' }));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Input("empty decision file".into()))?;
        let rest = header
            .strip_prefix(HEADER)
            .ok_or_else(|| Error::Input(format!("bad decision header: {header:?}")))?;
        let mut n = None;
        let mut d_head = None;
        let mut d_int = None;
        for field in rest.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("bad header field {field:?}")))?;
            let v: usize = v
                .parse()
                .map_err(|_| Error::Input(format!("bad header value {field:?}")))?;
            match k {
                "N" => n = Some(v),
                "dhead" => d_head = Some(v),
                "dint" => d_int = Some(v),
                _ => return Err(Error::Input(format!("unknown header field {k:?}"))),
            }
        }
        let (Some(n), Some(d_head), Some(d_int)) = (n, d_head, d_int) else {
            return Err(Error::Input("decision header missing N, dhead or dint".into()));
        };
        let mut layers = Vec::with_capacity(n);
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let bits = line
                .trim()
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    _ => Err(Error::Input(format!("layer {i}: invalid decision character {c:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerDecisions::from_concat(&bits, d_head, d_int)?);
        }
        if layers.len() != n {
            return Err(Error::Input(format!("header says {n} layers, found {}", layers.len())));
        }
        Ok(Self { layers })
    }
}
