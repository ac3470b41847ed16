//! The alternating ATP loop, the generator update, AdamW, pretraining of the
//! dense base, and the two-stage baseline.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{Adapters, Mode};
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorState, Rounding};
use crate::model::{count_remaining, forward, lm_loss, DecisionSet, ForwardSpec, Model, ModelConfig, Token, TokenBatch};
use crate::numerics::rng::{stream, Stream};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::objectives::{
    group_lasso_graph, objective_g, objective_l, sparsity_loss, sparsity_loss_graph, SparsityTarget,
};

/// Loss above which a run is declared diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub t: usize,
    pub t_end: usize,
    pub alpha: f64,
    pub beta: f64,
    pub beta_mult: f64,
    pub lr_lora: f64,
    pub lr_g: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_train: usize,
    pub batch_calib: usize,
    pub seq_len: usize,
    pub p: f64,
    pub seed: u64,
    pub lora_rank: usize,
    /// Global-norm gradient clip; `0` disables.
    pub grad_clip: f64,
    /// Record real elapsed time in the log. Off keeps logs byte-reproducible.
    pub log_wall_time: bool,
    /// Evaluate `L_s` on the noise-free decisions (those that are frozen and
    /// exported) instead of the sampled ones used for the LM term.
    pub sparsity_noise_free: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            t: 600,
            t_end: 300,
            alpha: 5.0,
            beta: 0.3,
            beta_mult: 100.0,
            lr_lora: 1e-4,
            lr_g: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            batch_train: 8,
            batch_calib: 8,
            seq_len: 32,
            p: 0.5,
            seed: 0,
            lora_rank: 8,
            grad_clip: 0.0,
            log_wall_time: false,
            sparsity_noise_free: true,
        }
    }
}

impl RunConfig {
    /// Defaults with `T` steps and `T_end = T/2`.
    pub fn with_steps(t: usize) -> Self {
        Self {
            t,
            t_end: (t / 2).max(1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.t_end < 1 || self.t_end > self.t {
            return bad(format!("need 1 <= t_end <= t, got t_end={} t={}", self.t_end, self.t));
        }
        if !(0.0..1.0).contains(&self.p) {
            return bad(format!("p = {} outside [0, 1)", self.p));
        }
        if !(self.lr_lora > 0.0 && self.lr_g > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("adam_eps must be positive; weight_decay and grad_clip non-negative".into());
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.beta_mult < 0.0 {
            return bad("alpha, beta and beta_mult must be non-negative".into());
        }
        if self.batch_train == 0 || self.batch_calib == 0 || self.seq_len < 2 || self.lora_rank == 0 {
            return bad("batch sizes and lora_rank must be positive, seq_len at least 2".into());
        }
        Ok(())
    }

    /// `β_t`: `β` up to `T_end`, `β·β_mult` afterwards.
    pub fn beta_at(&self, step: usize) -> f64 {
        if step <= self.t_end {
            self.beta
        } else {
            self.beta * self.beta_mult
        }
    }

    fn adam(&self, lr: f64) -> AdamParams {
        AdamParams {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamParams {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW moments for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(Tensor::zeros_like).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update with bias correction.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    hp: AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adamw: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerics(crate::numerics::NumericsError::NonFinite(format!(
            "gradient of parameter {i}"
        ))));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2) = (T::lit(hp.beta1), T::lit(hp.beta2));
    let (one, lr, eps) = (T::one(), T::lit(hp.lr), T::lit(hp.eps));
    let decay = T::lit(1.0 - hp.lr * hp.weight_decay);
    let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != g.shape() {
            return Err(Error::Shape(format!(
                "adamw: parameter {i} shape {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping. `max_norm = 0` leaves them untouched.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.sum_squares().as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

fn collect_grads<T: Scalar>(g: &Graph<T>, root: Var, vars: &[Var]) -> Result<Vec<Tensor<T>>> {
    let mut grads = g.backward(root)?;
    Ok(vars
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros_like(g.value(v))))
        .collect())
}

fn check_loss(step: usize, name: &str, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Diverged {
            step,
            reason: format!("{name} is {v}"),
        });
    }
    if v > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            step,
            reason: format!("{name} = {v} exceeds {DIVERGENCE_LIMIT}"),
        });
    }
    Ok(())
}

/// One row of the training log. Absent losses were not computed that step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub l_lm_g: Option<f64>,
    pub l_s: f64,
    pub l_lm: Option<f64>,
    pub l_gl: Option<f64>,
    pub remain_ratio: f64,
    pub beta: f64,
    pub wall_ms: u64,
}

pub const CSV_HEADER: &str = "step,l_lm_g,l_s,l_lm,l_gl,remain_ratio,beta,wall_ms";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.9e}"));
        format!(
            "{},{},{:.9e},{},{},{:.9},{},{}",
            self.step,
            opt(self.l_lm_g),
            self.l_s,
            opt(self.l_lm),
            opt(self.l_gl),
            self.remain_ratio,
            self.beta,
            self.wall_ms
        )
    }
}

pub fn log_to_csv(records: &[StepRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Calibration batches in fixed order, wrapping around. The last batch of a
/// cycle holds the remainder, so the period is `⌈len/batch⌉`.
#[derive(Debug, Clone)]
pub struct CalibCycle<'a> {
    data: &'a [Vec<Token>],
    batch: usize,
    next: usize,
}

impl<'a> CalibCycle<'a> {
    pub fn new(data: &'a [Vec<Token>], batch: usize) -> Result<Self> {
        if data.is_empty() || batch == 0 {
            return Err(Error::Input("calibration set and batch size must be nonempty".into()));
        }
        Ok(Self { data, batch, next: 0 })
    }

    pub fn period(&self) -> usize {
        self.data.len().div_ceil(self.batch)
    }

    pub fn next_batch(&mut self) -> Result<TokenBatch> {
        let start = self.next * self.batch;
        let end = (start + self.batch).min(self.data.len());
        self.next = (self.next + 1) % self.period();
        TokenBatch::new(self.data[start..end].to_vec())
    }
}

/// Uniform draws with replacement from the training windows.
pub fn sample_batch(data: &[Vec<Token>], batch: usize, rng: &mut impl Rng) -> Result<TokenBatch> {
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let seqs = (0..batch).map(|_| data[rng.gen_range(0..data.len())].clone()).collect();
    TokenBatch::new(seqs)
}

/// Everything that evolves during a run. The base model is borrowed
/// immutably, so neither update can touch it.
#[derive(Debug, Clone)]
pub struct AtpState<T> {
    pub adapters: Adapters<T>,
    pub generator: GeneratorState<T>,
    pub decisions: DecisionSet,
    pub gen_opt: OptimizerState<T>,
    pub lora_opt: OptimizerState<T>,
}

impl<T: Scalar> AtpState<T> {
    pub fn new(base: &Model<T>, config: &RunConfig) -> Result<Self> {
        let adapters = Adapters::init(&base.projection_shapes(), config.lora_rank, config.seed)?;
        let generator = GeneratorState::new(&base.config, GeneratorConfig::default(), config.seed)?;
        let decisions = generator.emit_deterministic();
        Ok(Self {
            gen_opt: OptimizerState::new(generator.tensors()),
            lora_opt: OptimizerState::new(adapters.tensors()),
            adapters,
            generator,
            decisions,
        })
    }
}

/// Losses of one generator update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GUpdate {
    pub l_lm_g: f64,
    pub l_s: f64,
}

/// Sampled emission, G-mode loss, `J_G` backward into `M` only, AdamW on
/// `M`, then a deterministic re-emission stored in `state.decisions`.
pub fn update_g<T: Scalar>(
    state: &mut AtpState<T>,
    base: &Model<T>,
    batch: &TokenBatch,
    config: &RunConfig,
    gumbel: &mut ChaCha8Rng,
    step: usize,
) -> Result<GUpdate> {
    let target = SparsityTarget::for_model(&base.config, config.p)?;
    let noise = state.generator.draw_noise(gumbel);
    let mut g = Graph::new();
    let gvars = state.generator.bind(&mut g, true);
    let logits = state.generator.soft_logits_graph(&mut g, &gvars);
    let (masks, _) = state
        .generator
        .decisions_from_logits(&mut g, &logits, Some(&noise), Rounding::Ste);
    let s_masks = if config.sparsity_noise_free {
        state.generator.decisions_from_logits(&mut g, &logits, None, Rounding::Ste).0
    } else {
        masks.clone()
    };
    let mvars = base.bind(&mut g, false);
    let avars = state.adapters.bind(&mut g, false);
    let spec = ForwardSpec {
        adapters: Some(&avars),
        masks: Some(&masks),
        mode: Mode::G,
    };
    let out_logits = forward(&mut g, base, &mvars, spec, batch)?;
    let lm = lm_loss(&mut g, out_logits, batch)?;
    let ls = sparsity_loss_graph(&mut g, &s_masks, &base.config, target);
    let j = objective_g(&mut g, lm, ls, config.alpha);
    let out = GUpdate {
        l_lm_g: g.value(lm).item().as_f64(),
        l_s: g.value(ls).item().as_f64(),
    };
    check_loss(step, "J_G", g.value(j).item().as_f64())?;
    let mut grads = collect_grads(&g, j, &gvars.params)?;
    drop(g);
    clip_global_norm(&mut grads, config.grad_clip);
    adamw_step(
        &mut state.generator.tensors_mut(),
        &grads,
        &mut state.gen_opt,
        config.adam(config.lr_g),
    )?;
    state.decisions = state.generator.emit_deterministic();
    Ok(out)
}

/// Losses of one adapter update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraUpdate {
    pub l_lm: f64,
    pub l_gl: f64,
}

/// L-mode loss plus `β·L_gl` under the current decisions, AdamW on the
/// adapter factors only.
pub fn update_lora<T: Scalar>(
    state: &mut AtpState<T>,
    base: &Model<T>,
    batch: &TokenBatch,
    config: &RunConfig,
    beta: f64,
    step: usize,
) -> Result<LoraUpdate> {
    let mut g = Graph::new();
    let mvars = base.bind(&mut g, false);
    let avars = state.adapters.bind(&mut g, true);
    let masks = state.decisions.bind(&mut g);
    let spec = ForwardSpec {
        adapters: Some(&avars),
        masks: Some(&masks),
        mode: Mode::L,
    };
    let logits = forward(&mut g, base, &mvars, spec, batch)?;
    let lm = lm_loss(&mut g, logits, batch)?;
    let gl = group_lasso_graph(&mut g, &avars, &state.decisions);
    let j = objective_l(&mut g, lm, gl, beta);
    let out = LoraUpdate {
        l_lm: g.value(lm).item().as_f64(),
        l_gl: g.value(gl).item().as_f64(),
    };
    check_loss(step, "J_L", g.value(j).item().as_f64())?;
    let mut grads = collect_grads(&g, j, &avars.all())?;
    drop(g);
    clip_global_norm(&mut grads, config.grad_clip);
    adamw_step(
        &mut state.adapters.tensors_mut(),
        &grads,
        &mut state.lora_opt,
        config.adam(config.lr_lora),
    )?;
    Ok(out)
}

/// Outcome of [`atp_run`] or [`two_stage_run`].
#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    pub adapters: Adapters<T>,
    pub generator: GeneratorState<T>,
    pub decisions: DecisionSet,
    pub log: Vec<StepRecord>,
    /// Final `R / P_total`.
    pub remain_ratio: f64,
    /// Set when the final ratio is not within 10% of `1 − p`.
    pub sparsity_warning: bool,
}

fn remain_ratio(config: &ModelConfig, d: &DecisionSet) -> f64 {
    count_remaining(config, d) as f64 / config.total_decoder_params() as f64
}

struct Clock {
    start: Instant,
    enabled: bool,
}

impl Clock {
    fn ms(&self) -> u64 {
        if self.enabled {
            self.start.elapsed().as_millis() as u64
        } else {
            0
        }
    }
}

fn finish<T: Scalar>(state: AtpState<T>, base: &ModelConfig, config: &RunConfig, log: Vec<StepRecord>) -> RunOutput<T> {
    let ratio = remain_ratio(base, &state.decisions);
    let want = 1.0 - config.p;
    RunOutput {
        adapters: state.adapters,
        generator: state.generator,
        sparsity_warning: (ratio - want).abs() > 0.1 * want,
        remain_ratio: ratio,
        decisions: state.decisions,
        log,
    }
}

fn check_run_inputs<T: Scalar>(
    config: &RunConfig,
    base: &Model<T>,
    train: &[Vec<Token>],
    calib: &[Vec<Token>],
) -> Result<()> {
    config.validate()?;
    base.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if calib.is_empty() {
        return Err(Error::Input("calibration set is empty".into()));
    }
    Ok(())
}

/// The one-stage loop: for `t ≤ T_end` a generator update on the next
/// calibration batch, then every step an adapter update on a sampled
/// training batch with `β_t`.
pub fn atp_run<T: Scalar>(
    config: &RunConfig,
    base: &Model<T>,
    train: &[Vec<Token>],
    calib: &[Vec<Token>],
) -> Result<RunOutput<T>> {
    check_run_inputs(config, base, train, calib)?;
    let target = SparsityTarget::for_model(&base.config, config.p)?;
    let mut state = AtpState::new(base, config)?;
    let mut cycle = CalibCycle::new(calib, config.batch_calib)?;
    let mut data_rng = stream(config.seed, Stream::Data);
    let mut gumbel = stream(config.seed, Stream::Gumbel);
    let clock = Clock {
        start: Instant::now(),
        enabled: config.log_wall_time,
    };
    let mut log = Vec::with_capacity(config.t);
    for step in 1..=config.t {
        let gu = if step <= config.t_end {
            let batch = cycle.next_batch()?;
            Some(update_g(&mut state, base, &batch, config, &mut gumbel, step)?)
        } else {
            None
        };
        let beta = config.beta_at(step);
        let batch = sample_batch(train, config.batch_train, &mut data_rng)?;
        let lu = update_lora(&mut state, base, &batch, config, beta, step)?;
        let remaining = count_remaining(&base.config, &state.decisions) as f64;
        log.push(StepRecord {
            step,
            l_lm_g: gu.map(|u| u.l_lm_g),
            l_s: gu.map_or_else(|| sparsity_loss(remaining, target), |u| u.l_s),
            l_lm: Some(lu.l_lm),
            l_gl: Some(lu.l_gl),
            remain_ratio: remaining / target.p_total as f64,
            beta,
            wall_ms: clock.ms(),
        });
    }
    Ok(finish(state, &base.config, config, log))
}

/// Baseline with the same budget: `T_end` generator updates against the
/// frozen base (adapters untouched, so their contribution is zero), then
/// `T − T_end` adapter updates at `β·β_mult` with the decisions frozen.
pub fn two_stage_run<T: Scalar>(
    config: &RunConfig,
    base: &Model<T>,
    train: &[Vec<Token>],
    calib: &[Vec<Token>],
) -> Result<RunOutput<T>> {
    check_run_inputs(config, base, train, calib)?;
    let target = SparsityTarget::for_model(&base.config, config.p)?;
    let mut state = AtpState::new(base, config)?;
    let mut cycle = CalibCycle::new(calib, config.batch_calib)?;
    let mut data_rng = stream(config.seed, Stream::Data);
    let mut gumbel = stream(config.seed, Stream::Gumbel);
    let clock = Clock {
        start: Instant::now(),
        enabled: config.log_wall_time,
    };
    let mut log = Vec::with_capacity(config.t);
    let beta = config.beta * config.beta_mult;
    for step in 1..=config.t {
        let record = if step <= config.t_end {
            let batch = cycle.next_batch()?;
            let u = update_g(&mut state, base, &batch, config, &mut gumbel, step)?;
            StepRecord {
                step,
                l_lm_g: Some(u.l_lm_g),
                l_s: u.l_s,
                l_lm: None,
                l_gl: None,
                remain_ratio: 0.0,
                beta: 0.0,
                wall_ms: 0,
            }
        } else {
            let batch = sample_batch(train, config.batch_train, &mut data_rng)?;
            let u = update_lora(&mut state, base, &batch, config, beta, step)?;
            let remaining = count_remaining(&base.config, &state.decisions) as f64;
            StepRecord {
                step,
                l_lm_g: None,
                l_s: sparsity_loss(remaining, target),
                l_lm: Some(u.l_lm),
                l_gl: Some(u.l_gl),
                remain_ratio: 0.0,
                beta,
                wall_ms: 0,
            }
        };
        log.push(StepRecord {
            remain_ratio: remain_ratio(&base.config, &state.decisions),
            wall_ms: clock.ms(),
            ..record
        });
    }
    Ok(finish(state, &base.config, config, log))
}

/// Settings for dense pretraining of the base model.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub grad_clip: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            lr: 3e-3,
            batch: 16,
            seed: 0,
            grad_clip: 1.0,
        }
    }
}

/// Full-parameter AdamW on the dense forward. Returns the trained model and
/// the per-step loss.
pub fn pretrain<T: Scalar>(
    model_config: &ModelConfig,
    config: &PretrainConfig,
    train: &[Vec<Token>],
) -> Result<(Model<T>, Vec<f64>)> {
    let mut model = Model::<T>::init(model_config.clone(), config.seed)?;
    let mut opt = OptimizerState::new(model.tensors_mut().into_iter().map(|t| &*t));
    let mut rng = stream(config.seed, Stream::Data);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let batch = sample_batch(train, config.batch, &mut rng)?;
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let logits = forward(&mut g, &model, &vars, ForwardSpec::dense(), &batch)?;
        let loss = lm_loss(&mut g, logits, &batch)?;
        let lv = g.value(loss).item().as_f64();
        check_loss(step, "pretrain loss", lv)?;
        losses.push(lv);
        let mut grads = collect_grads(&g, loss, &vars.all())?;
        drop(g);
        clip_global_norm(&mut grads, config.grad_clip);
        adamw_step(&mut model.tensors_mut(), &grads, &mut opt, AdamParams::new(config.lr))?;
    }
    Ok((model, losses))
}
