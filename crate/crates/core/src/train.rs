//! Cold-start cross-entropy training and group-relative policy optimization.
//!
//! The RL objective per response token is the clipped importance-weighted
//! advantage minus a KL penalty against the fixed reference policy:
//!
//! ```text
//! term = min(rho * A, clip(rho, 1-eps, 1+eps) * A) - beta * (r - log r - 1)
//! ```
//!
//! with rho = pi_theta / pi_old and r = pi_ref / pi_theta, both per token.
//! Token terms are averaged per member, then over the group. Gradients are
//! exact: each member needs one backward pass with per-token weights.

use crate::codec::{Codebook, Control, TokenSequence};
use crate::policy::{Gradient, Model, PolicyError, PolicyParams, PolicyTensors};
use crate::rewards::{total_rewards, GroupScorer, RewardBreakdown, RewardError, RewardToggles, Scorer};
use crate::rng::derive_seed;
use crate::tensor::Real;
use crate::trace::{GtBundle, TraceLayout};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
#[allow(unused_imports)]
use num_traits::Float;

/// Hyperparameters of the GRPO run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides epochs when nonzero: run exactly this many batch updates.
    pub iterations: usize,
    pub max_response_tokens: usize,
    pub temperature: f64,
    /// Guard added to the advantage denominator.
    pub adv_delta: f64,
    pub toggles: RewardToggles,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 3,
            clip_eps: 0.2,
            kl_beta: 0.01,
            lr: 1e-5,
            batch_size: 8,
            epochs: 2,
            iterations: 0,
            max_response_tokens: 768,
            temperature: 1.0,
            adv_delta: 1e-8,
            toggles: RewardToggles::default(),
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.group_size < 2 {
            return Err(TrainError::BadConfig("group size must be at least 2"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(TrainError::BadConfig("clip epsilon must lie in (0,1)"));
        }
        if self.kl_beta < 0.0 {
            return Err(TrainError::BadConfig("kl beta must be nonnegative"));
        }
        if self.adv_delta <= 0.0 {
            return Err(TrainError::BadConfig("advantage delta must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    BadConfig(&'static str),
    DomainError(&'static str),
    EmptyDataset,
    Policy(PolicyError),
    Reward(RewardError),
    Trace(crate::trace::TraceError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::BadConfig(m) => write!(f, "bad training config: {m}"),
            TrainError::DomainError(m) => write!(f, "{m}"),
            TrainError::EmptyDataset => write!(f, "empty dataset"),
            TrainError::Policy(e) => write!(f, "{e}"),
            TrainError::Reward(e) => write!(f, "{e}"),
            TrainError::Trace(e) => write!(f, "{e}"),
        }
    }
}

impl From<PolicyError> for TrainError {
    fn from(e: PolicyError) -> Self {
        TrainError::Policy(e)
    }
}

impl From<RewardError> for TrainError {
    fn from(e: RewardError) -> Self {
        TrainError::Reward(e)
    }
}

impl From<crate::trace::TraceError> for TrainError {
    fn from(e: crate::trace::TraceError) -> Self {
        TrainError::Trace(e)
    }
}

/// Group-normalized advantages with a population-std denominator.
///
/// Zero-variance groups (std <= delta) yield all-zero advantages.
pub fn compute_advantages(rewards: &[f64], delta: f64) -> Vec<f64> {
    let n = rewards.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std <= delta {
        return vec![0.0; n];
    }
    rewards.iter().map(|r| (r - mean) / (std + delta)).collect()
}

/// Per-token KL estimate r - log r - 1 with r = pi_ref / pi_theta.
///
/// Nonnegative everywhere; zero exactly at ratio 1.
pub fn kl_token(pi_theta: f64, pi_ref: f64) -> Result<f64, TrainError> {
    if pi_theta <= 0.0 || pi_ref <= 0.0 {
        return Err(TrainError::DomainError("probabilities must be positive"));
    }
    let r = pi_ref / pi_theta;
    Ok(r - r.ln() - 1.0)
}

/// Same estimator from log-probabilities (avoids underflow).
fn kl_from_logs(log_theta: f64, log_ref: f64) -> f64 {
    let x = log_ref - log_theta;
    x.exp() - x - 1.0
}

/// The clipped surrogate for one token.
pub fn surrogate_term(rho: f64, advantage: f64, eps: f64) -> f64 {
    let unclipped = rho * advantage;
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps) * advantage;
    unclipped.min(clipped)
}

// ---------------------------------------------------------------------------
// Cold start
// ---------------------------------------------------------------------------

/// Mean cross-entropy over response tokens and its gradient, given the full
/// token sequence and the prompt length.
pub fn coldstart_loss_and_grad_ids<T: Real>(
    model: &Model<T>,
    ids: &[u32],
    prompt_len: usize,
) -> Result<(f64, Gradient<T>), TrainError> {
    let t_resp = ids.len() - prompt_len;
    let weights = vec![-1.0 / t_resp as f64; t_resp];
    let (loss, grad) = model.grad_weighted_log_prob(ids, prompt_len, &weights)?;
    Ok((loss, grad))
}

/// Supervised loss on one bundle: query is the prompt, the rendered GT trace
/// is the supervision target.
pub fn coldstart_loss_and_grad(
    params: &PolicyParams,
    bundle: &GtBundle,
    layout: &TraceLayout,
) -> Result<(f64, Gradient<f32>), TrainError> {
    let ids = coldstart_sequence(bundle, layout)?;
    let model = Model::<f32>::from_params(params);
    coldstart_loss_and_grad_ids(&model, &ids, bundle.query.len())
}

/// Query tokens followed by the rendered ground-truth trace.
pub fn coldstart_sequence(bundle: &GtBundle, layout: &TraceLayout) -> Result<Vec<u32>, TrainError> {
    let rendered = crate::trace::render_trace(&bundle.trace, layout)?;
    let mut ids = bundle.query.ids.clone();
    ids.extend_from_slice(&rendered.ids);
    Ok(ids)
}

/// Plain AdamW descent on the cold-start loss, cycling through the bundles.
/// Returns the per-step loss curve.
pub fn train_coldstart(
    params: &mut PolicyParams,
    bundles: &[GtBundle],
    layout: &TraceLayout,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>, TrainError> {
    if bundles.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut state = OptState::new(&params.cfg);
    let mut curve = Vec::with_capacity(steps);
    let sequences: Vec<(Vec<u32>, usize)> = bundles
        .iter()
        .map(|b| Ok((coldstart_sequence(b, layout)?, b.query.len())))
        .collect::<Result<_, TrainError>>()?;
    for step in 0..steps {
        let (ids, prompt_len) = &sequences[step % sequences.len()];
        let model = Model::<f32>::from_params(params);
        let (loss, mut grad) = coldstart_loss_and_grad_ids(&model, ids, *prompt_len)?;
        // Descent on the loss == ascent on its negation.
        grad.scale(-1.0);
        adamw_update(params, &grad, &mut state, lr)?;
        curve.push(loss);
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

/// G sampled responses for one query, with everything GRPO needs.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    /// Full token sequences (query prefix + sampled response).
    pub members: Vec<Vec<u32>>,
    pub prompt_len: usize,
    /// Per-member per-response-token log-probs under the sampling policy.
    pub old_log_probs: Vec<Vec<f64>>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
}

/// Samples a group from the old policy and scores it.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    params_old: &PolicyParams,
    bundle: &GtBundle,
    codebook: &Codebook,
    layout: &TraceLayout,
    cfg: &GrpoConfig,
    scorer: Scorer,
    rng_seed: u64,
) -> Result<RolloutGroup, TrainError> {
    let model = Model::<f32>::from_params(params_old);
    rollout_with_model(&model, bundle, codebook, layout, cfg, scorer, rng_seed)
}

/// Rollout against an already-converted compute model (saves re-conversion
/// when one snapshot serves a whole batch).
#[allow(clippy::too_many_arguments)]
pub fn rollout_with_model(
    model: &Model<f32>,
    bundle: &GtBundle,
    codebook: &Codebook,
    layout: &TraceLayout,
    cfg: &GrpoConfig,
    scorer: Scorer,
    rng_seed: u64,
) -> Result<RolloutGroup, TrainError> {
    cfg.validate()?;
    let prompt = &bundle.query.ids;
    let prompt_len = prompt.len();
    let max_len = (prompt_len + cfg.max_response_tokens).min(model.cfg.max_len);

    let mut members = Vec::with_capacity(cfg.group_size);
    let mut old_log_probs = Vec::with_capacity(cfg.group_size);
    let mut responses = Vec::with_capacity(cfg.group_size);
    for i in 0..cfg.group_size {
        let seed = derive_seed(rng_seed, i as u64);
        let (ids, lps) =
            model.sample_sequence(prompt, cfg.temperature, max_len, Control::Eos.id(), seed)?;
        let mut response = TokenSequence::new();
        for &id in &ids[prompt_len..] {
            response.push(id);
        }
        members.push(ids);
        old_log_probs.push(lps);
        responses.push(response);
    }

    let rewards = total_rewards(&responses, bundle, codebook, layout, scorer, &cfg.toggles)?;
    let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
    let advantages = compute_advantages(&totals, cfg.adv_delta);
    Ok(RolloutGroup {
        members,
        prompt_len,
        old_log_probs,
        rewards,
        advantages,
    })
}

// ---------------------------------------------------------------------------
// GRPO objective
// ---------------------------------------------------------------------------

/// Objective value and exact gradient for one rollout group.
pub fn grpo_objective_and_grad(
    params: &PolicyParams,
    reference: &PolicyParams,
    group: &RolloutGroup,
    cfg: &GrpoConfig,
) -> Result<(f64, Gradient<f32>), TrainError> {
    let model = Model::<f32>::from_params(params);
    let ref_model = Model::<f32>::from_params(reference);
    grpo_objective_and_grad_t(&model, &ref_model, group, cfg)
}

/// Generic-precision core of [`grpo_objective_and_grad`]; also reports the
/// mean per-token KL for logging.
pub fn grpo_objective_and_grad_t<T: Real>(
    model: &Model<T>,
    ref_model: &Model<T>,
    group: &RolloutGroup,
    cfg: &GrpoConfig,
) -> Result<(f64, Gradient<T>), TrainError> {
    Ok(grpo_step_t(model, ref_model, group, cfg)?.0)
}

#[allow(clippy::type_complexity)]
fn grpo_step_t<T: Real>(
    model: &Model<T>,
    ref_model: &Model<T>,
    group: &RolloutGroup,
    cfg: &GrpoConfig,
) -> Result<((f64, Gradient<T>), f64), TrainError> {
    cfg.validate()?;
    if group.members.len() != group.advantages.len()
        || group.members.len() != group.old_log_probs.len()
    {
        return Err(TrainError::BadConfig("ragged rollout group"));
    }
    let g = group.members.len() as f64;
    let mut objective = 0.0f64;
    let mut grad = Gradient::<T>::zeros(&model.cfg);
    let mut kl_sum = 0.0f64;
    let mut kl_count = 0usize;

    for (i, ids) in group.members.iter().enumerate() {
        let t_resp = ids.len() - group.prompt_len;
        if t_resp == 0 {
            continue;
        }
        let advantage = group.advantages[i];
        let old = &group.old_log_probs[i];
        if old.len() != t_resp {
            return Err(TrainError::BadConfig("old log-prob length mismatch"));
        }
        let cur = model.sequence_log_prob(ids, group.prompt_len)?;
        let refl = ref_model.sequence_log_prob(ids, group.prompt_len)?;

        let mut member_obj = 0.0f64;
        let mut weights = vec![0.0f64; t_resp];
        let inv = 1.0 / (g * t_resp as f64);
        for t in 0..t_resp {
            let rho = (cur[t] - old[t]).exp();
            let unclipped = rho * advantage;
            let clipped = rho.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * advantage;
            let kl = kl_from_logs(cur[t], refl[t]);
            kl_sum += kl;
            kl_count += 1;
            member_obj += unclipped.min(clipped) - cfg.kl_beta * kl;
            // d term / d logpi: surrogate active only on the unclipped branch;
            // the KL part differentiates to beta * (r - 1).
            let mut w = if unclipped <= clipped { unclipped } else { 0.0 };
            w += cfg.kl_beta * ((refl[t] - cur[t]).exp() - 1.0);
            weights[t] = w * inv;
        }
        objective += member_obj / (g * t_resp as f64);
        let (_, member_grad) = model.grad_weighted_log_prob(ids, group.prompt_len, &weights)?;
        grad.add_scaled(&member_grad, T::one());
    }
    let kl_mean = if kl_count == 0 { 0.0 } else { kl_sum / kl_count as f64 };
    Ok(((objective, grad), kl_mean))
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// AdamW moments plus the step counter; ascent on the given gradient with
/// decoupled weight decay.
#[derive(Debug, Clone)]
pub struct OptState {
    pub step: u64,
    pub m: PolicyTensors<f32>,
    pub v: PolicyTensors<f32>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptState {
    pub fn new(cfg: &crate::policy::PolicyConfig) -> Self {
        Self {
            step: 0,
            m: PolicyTensors::zeros(cfg),
            v: PolicyTensors::zeros(cfg),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW step ascending the objective whose gradient is `grad`.
pub fn adamw_update(
    params: &mut PolicyParams,
    grad: &Gradient<f32>,
    state: &mut OptState,
    lr: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    let eps = state.eps;
    let decay = lr * state.weight_decay;

    let p_arrays = params.tensors.arrays_mut();
    let m_arrays = state.m.arrays_mut();
    let v_arrays = state.v.arrays_mut();
    let g_arrays = grad.arrays();
    if p_arrays.len() != g_arrays.len() {
        return Err(TrainError::BadConfig("gradient shape mismatch"));
    }
    for (((p, m), v), g) in p_arrays
        .into_iter()
        .zip(m_arrays)
        .zip(v_arrays)
        .zip(g_arrays)
    {
        if p.len() != g.len() {
            return Err(TrainError::BadConfig("gradient shape mismatch"));
        }
        for i in 0..p.len() {
            let gi = g[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            let p64 = p[i] as f64;
            p[i] = (p64 + lr * mhat / (vhat.sqrt() + eps) - decay * p64) as f32;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Per-iteration statistics of the GRPO loop.
#[derive(Debug, Clone, PartialEq)]
pub struct GrpoLogRow {
    pub iteration: usize,
    pub mean_total: f64,
    pub mean_form: f64,
    pub mean_deg: f64,
    pub mean_und: f64,
    pub mean_gen: f64,
    pub objective: f64,
    pub kl_mean: f64,
}

/// Which built-in generation scorer the loop should use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerKind {
    Composite,
    FidelityOnly,
    NorefOnly,
}

fn make_scorer<'a>(
    kind: ScorerKind,
    expert: &'a mut Option<&mut dyn GroupScorer>,
) -> Scorer<'a> {
    match expert {
        Some(e) => Scorer::Expert(&mut **e),
        None => match kind {
            ScorerKind::Composite => Scorer::Composite,
            ScorerKind::FidelityOnly => Scorer::FidelityOnly,
            ScorerKind::NorefOnly => Scorer::NorefOnly,
        },
    }
}

/// GRPO over the dataset: the reference policy is the initial checkpoint,
/// the old policy is re-snapshotted every batch, and each batch takes one
/// ascent step on the mean objective.
pub fn train_grpo(
    cfg: &GrpoConfig,
    bundles: &[GtBundle],
    init: &PolicyParams,
    codebook: &Codebook,
    layout: &TraceLayout,
    scorer_kind: ScorerKind,
    mut expert: Option<&mut dyn GroupScorer>,
    mut on_iteration: Option<&mut dyn FnMut(&GrpoLogRow)>,
) -> Result<(PolicyParams, Vec<GrpoLogRow>), TrainError> {
    cfg.validate()?;
    if bundles.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::BadConfig("batch size must be positive"));
    }
    let mut params = init.clone();
    let reference = init.clone();
    let ref_model = Model::<f32>::from_params(&reference);
    let mut state = OptState::new(&params.cfg);

    let batches_per_epoch = bundles.len().div_ceil(cfg.batch_size);
    let total_iterations = if cfg.iterations > 0 {
        cfg.iterations
    } else {
        cfg.epochs * batches_per_epoch
    };

    let mut log = Vec::with_capacity(total_iterations);
    let mut cursor = 0usize;
    for iteration in 0..total_iterations {
        // One snapshot serves the whole batch: theta == theta_old here
        // because exactly one update happens per batch.
        let model = Model::<f32>::from_params(&params);
        let mut grad = Gradient::<f32>::zeros(&params.cfg);
        let mut objective = 0.0f64;
        let mut kl_acc = 0.0f64;
        let mut reward_acc = RewardBreakdown::zero();
        let mut member_count = 0usize;

        for b in 0..cfg.batch_size {
            let bundle = &bundles[cursor % bundles.len()];
            cursor += 1;
            let seed = derive_seed(cfg.seed, (iteration * cfg.batch_size + b) as u64);
            let group = rollout_with_model(
                &model,
                bundle,
                codebook,
                layout,
                cfg,
                make_scorer(scorer_kind, &mut expert),
                seed,
            )?;
            for r in &group.rewards {
                reward_acc.form += r.form;
                reward_acc.deg += r.deg;
                reward_acc.und += r.und;
                reward_acc.gen += r.gen;
                reward_acc.total += r.total;
                member_count += 1;
            }
            let ((obj, batch_grad), kl_mean) = grpo_step_t(&model, &ref_model, &group, cfg)?;
            objective += obj;
            kl_acc += kl_mean;
            grad.add_scaled(&batch_grad, 1.0);
        }

        let nb = cfg.batch_size as f64;
        grad.scale(1.0 / nb as f32);
        adamw_update(&mut params, &grad, &mut state, cfg.lr)?;

        let nm = member_count.max(1) as f64;
        let row = GrpoLogRow {
            iteration,
            mean_total: reward_acc.total / nm,
            mean_form: reward_acc.form / nm,
            mean_deg: reward_acc.deg / nm,
            mean_und: reward_acc.und / nm,
            mean_gen: reward_acc.gen / nm,
            objective: objective / nb,
            kl_mean: kl_acc / nb,
        };
        if let Some(cb) = on_iteration.as_mut() {
            cb(&row);
        }
        log.push(row);
    }
    Ok((params, log))
}
