//! Physical removal of pruned groups: merge adapters, slice rows and columns
//! per the frozen decisions, and check the result against the masked model.

pub mod checkpoint;

use rand::Rng;

use crate::adapters::{Adapters, Mode, Role};
use crate::error::{Error, Result};
use crate::model::{model_logits, popcount, DecisionSet, DecoderLayer, Model, ModelConfig, Token, TokenBatch};
use crate::numerics::rng::{stream, Stream};
use crate::numerics::{Scalar, Tensor};

/// Kept indices of one layer. Per-head lists are expanded across heads in
/// the `*_cols` fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    pub qk: Vec<usize>,
    pub v: Vec<usize>,
    pub gu: Vec<usize>,
    /// Kept Q/K columns across all heads.
    pub qk_cols: Vec<usize>,
    /// Kept V columns across all heads, which are also the kept `W_O` rows.
    pub v_cols: Vec<usize>,
}

impl LayerPlan {
    /// Attention with no query/key or value dimension left.
    pub fn attn_degenerate(&self) -> bool {
        self.qk.is_empty() || self.v.is_empty()
    }

    pub fn mlp_degenerate(&self) -> bool {
        self.gu.is_empty()
    }

    /// `(k_qk, k_v, k_gu)`.
    pub fn widths(&self) -> (usize, usize, usize) {
        (self.qk.len(), self.v.len(), self.gu.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompactPlan {
    pub base: ModelConfig,
    pub layers: Vec<LayerPlan>,
}

impl CompactPlan {
    /// Decoder parameters of the compacted model.
    pub fn param_count(&self) -> u64 {
        let (dh, h) = (self.base.d_hidden as u64, self.base.n_heads as u64);
        self.layers
            .iter()
            .map(|l| {
                let (qk, v, gu) = l.widths();
                2 * dh * h * qk as u64 + 2 * dh * h * v as u64 + 3 * dh * gu as u64 + 2 * dh
            })
            .sum()
    }

    pub fn is_identity(&self) -> bool {
        self.layers.iter().all(|l| {
            l.qk.len() == self.base.d_head && l.v.len() == self.base.d_head && l.gu.len() == self.base.d_int
        })
    }
}

fn kept(bits: &[bool]) -> Vec<usize> {
    bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

fn across_heads(idx: &[usize], d_head: usize, heads: usize) -> Vec<usize> {
    (0..heads).flat_map(|h| idx.iter().map(move |&i| h * d_head + i)).collect()
}

pub fn build_plan(decisions: &DecisionSet, config: &ModelConfig) -> Result<CompactPlan> {
    decisions.validate(config)?;
    let layers = decisions
        .layers
        .iter()
        .map(|l| {
            let (qk, v, gu) = (kept(&l.qk), kept(&l.v), kept(&l.gu));
            LayerPlan {
                qk_cols: across_heads(&qk, config.d_head, config.n_heads),
                v_cols: across_heads(&v, config.d_head, config.n_heads),
                qk,
                v,
                gu,
            }
        })
        .collect();
    Ok(CompactPlan {
        base: config.clone(),
        layers,
    })
}

/// Merged weights `W + Wa·Wb` with pruned adapter groups zeroed first.
fn merged<T: Scalar>(model: &Model<T>, adapters: &Adapters<T>, plan: &CompactPlan, n: usize, role: Role) -> Tensor<T> {
    let w = model.layers[n].get(role);
    let f = adapters.get(n, role);
    let lp = &plan.layers[n];
    let mask = |len: usize, keep: &[usize]| {
        let mut m = vec![T::zero(); len];
        keep.iter().for_each(|&i| m[i] = T::one());
        m
    };
    let b = match role {
        Role::Q | Role::K => f.b.mul_cols(&mask(f.b.cols(), &lp.qk_cols)),
        Role::V => f.b.mul_cols(&mask(f.b.cols(), &lp.v_cols)),
        Role::Gate | Role::Up => f.b.mul_cols(&mask(f.b.cols(), &lp.gu)),
        Role::O | Role::Down => f.b.clone(),
    };
    let a = match role {
        Role::O => f.a.mul_rows(&mask(f.a.rows(), &lp.v_cols)),
        Role::Down => f.a.mul_rows(&mask(f.a.rows(), &lp.gu)),
        _ => f.a.clone(),
    };
    let ab = crate::numerics::matmul(&a, &b).expect("adapter factor shapes");
    w.add(&ab)
}

/// Merge, then slice every projection per `plan`. Embeddings and norms are
/// copied. The result carries no adapters and has per-layer widths.
pub fn compact<T: Scalar>(model: &Model<T>, adapters: &Adapters<T>, plan: &CompactPlan) -> Result<Model<T>> {
    model.validate()?;
    if plan.base != model.config {
        return Err(Error::Contract("plan was built for a different model config".into()));
    }
    if plan.layers.len() != model.layers.len() || adapters.layers.len() != model.layers.len() {
        return Err(Error::Contract("plan, adapters and model disagree on layer count".into()));
    }
    checkpoint::check_adapters_fit(model, adapters)?;
    let c = &model.config;
    for (n, lp) in plan.layers.iter().enumerate() {
        let in_range = |idx: &[usize], len: usize| idx.windows(2).all(|w| w[0] < w[1]) && idx.iter().all(|&i| i < len);
        if !in_range(&lp.qk, c.d_head)
            || !in_range(&lp.v, c.d_head)
            || !in_range(&lp.gu, c.d_int)
            || !in_range(&lp.qk_cols, c.d_head * c.n_heads)
            || !in_range(&lp.v_cols, c.d_head * c.n_heads)
            || lp.qk_cols.len() != lp.qk.len() * c.n_heads
            || lp.v_cols.len() != lp.v.len() * c.n_heads
        {
            return Err(Error::Contract(format!("layer {n}: plan indices are not sorted and in range")));
        }
    }
    let layers = (0..model.layers.len())
        .map(|n| {
            let lp = &plan.layers[n];
            let w = |role| merged(model, adapters, plan, n, role);
            let proj = Role::ALL
                .iter()
                .map(|&role| match role {
                    Role::Q | Role::K => w(role).select_cols(&lp.qk_cols),
                    Role::V => w(role).select_cols(&lp.v_cols),
                    Role::O => w(role).select_rows(&lp.v_cols),
                    Role::Gate | Role::Up => w(role).select_cols(&lp.gu),
                    Role::Down => w(role).select_rows(&lp.gu),
                })
                .collect();
            DecoderLayer {
                attn_norm: model.layers[n].attn_norm.clone(),
                mlp_norm: model.layers[n].mlp_norm.clone(),
                proj,
            }
        })
        .collect();
    let out = Model {
        config: model.config.clone(),
        tok_emb: model.tok_emb.clone(),
        pos_emb: model.pos_emb.clone(),
        layers,
        final_norm: model.final_norm.clone(),
        unembed: model.unembed.clone(),
    };
    out.validate()?;
    Ok(out)
}

/// `(k_qk, k_v, k_gu)` of every layer of a (possibly compacted) model.
pub fn layer_widths<T: Scalar>(model: &Model<T>) -> Vec<(usize, usize, usize)> {
    model
        .layers
        .iter()
        .map(|l| {
            let w = l.widths(model.config.n_heads);
            (w.qk, w.v, w.gu)
        })
        .collect()
}

/// Outcome of [`verify_equivalence`].
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    /// max over probes and logits of `|compact − masked| / (1 + |masked|)`
    pub max_deviation: f64,
    pub worst_probe: usize,
    pub worst_tokens: Vec<Token>,
    pub probes: usize,
    pub tolerance: f64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.max_deviation <= self.tolerance
    }

    pub fn to_text(&self) -> String {
        format!(
            "probes={}\ntolerance={:e}\nmax_deviation={:e}\nworst_probe={}\nworst_tokens={:?}\nstatus={}\n",
            self.probes,
            self.tolerance,
            self.max_deviation,
            self.worst_probe,
            self.worst_tokens,
            if self.passed() { "pass" } else { "fail" }
        )
    }
}

/// Uniformly random probe sequences from the probe stream of `seed`.
pub fn probe_sequences(config: &ModelConfig, n: usize, len: usize, seed: u64) -> Vec<Vec<Token>> {
    let mut rng = stream(seed, Stream::Probe);
    (0..n)
        .map(|_| (0..len).map(|_| rng.gen_range(0..config.vocab as Token)).collect())
        .collect()
}

/// Compares compact logits with G-mode masked logits of the model with its
/// adapters on `n_probes` random sequences. Fails with the worst probe when
/// the deviation exceeds `tolerance`.
pub fn verify_equivalence<T: Scalar>(
    model: &Model<T>,
    adapters: &Adapters<T>,
    decisions: &DecisionSet,
    compact: &Model<T>,
    n_probes: usize,
    probe_len: usize,
    tolerance: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    if n_probes == 0 || probe_len == 0 || probe_len > model.config.max_seq {
        return Err(Error::Contract("need at least one probe of length 1..=max_seq".into()));
    }
    let probes = probe_sequences(&model.config, n_probes, probe_len, seed);
    let batch = TokenBatch::new(probes.clone())?;
    let masked = model_logits(model, Some(adapters), Some(decisions), Mode::G, &batch)?;
    let slim = model_logits(compact, None, None, Mode::Dense, &batch)?;
    let v = masked.cols();
    let per_probe = probe_len * v;
    let mut report = EquivalenceReport {
        max_deviation: 0.0,
        worst_probe: 0,
        worst_tokens: probes[0].clone(),
        probes: n_probes,
        tolerance,
    };
    for (i, (a, b)) in masked.data().iter().zip(slim.data()).enumerate() {
        let (a, b) = (a.as_f64(), b.as_f64());
        let dev = (b - a).abs() / (1.0 + a.abs());
        // NaN compares false, so route it through explicitly
        if dev > report.max_deviation || dev.is_nan() {
            report.max_deviation = if dev.is_nan() { f64::INFINITY } else { dev };
            report.worst_probe = i / per_probe;
        }
    }
    report.worst_tokens = probes[report.worst_probe].clone();
    if !report.passed() {
        return Err(Error::Verification(format!(
            "max relative logit deviation {:e} exceeds {:e} on probe {} (tokens {:?})",
            report.max_deviation, tolerance, report.worst_probe, report.worst_tokens
        )));
    }
    Ok(report)
}

/// Fraction of zero bits, `(len − popcount)/len`.
pub fn pruned_fraction(bits: &[bool]) -> f64 {
    if bits.is_empty() {
        0.0
    } else {
        (bits.len() - popcount(bits)) as f64 / bits.len() as f64
    }
}
