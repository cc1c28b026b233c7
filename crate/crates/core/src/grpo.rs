//! Group-relative policy optimization of the flow policy.
//!
//! Each step samples `G` SDE trajectories per prompt, scores them, normalizes
//! rewards over the top-k/bottom-k subset `S`, and takes one Adam step on the
//! low-rank adapter using a clipped-ratio surrogate with a closed-form KL anchor
//! to the base network.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::flow::{
    apply_adapter, gaussian_logpdf, mean_velocity_gain, sde_sample, transition_mean, LowRankAdapter, SdeSchedule,
    Trajectory, VelocityField, VelocityNet,
};
use crate::numerics::{mean, pop_std, Adam, GradBundle, RngStream};
use crate::reward::SceneScorer;
use crate::scene::{oracle_score, Scene, SpatialPrompt};

/// Bound on `|logp_θ - logp_old|` before exponentiating.
pub const LOG_RATIO_LIMIT: f64 = 20.0;
const MEMBER_RETRIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardSource {
    Learned,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    /// Members kept from each end of the ranking; 0 keeps the whole group.
    pub k: usize,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub lr: f64,
    pub schedule: SdeSchedule,
    pub reward_source: RewardSource,
    pub std_guard: f64,
    pub prompts_per_step: usize,
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 24,
            k: 6,
            clip_eps: 1e-4,
            kl_coef: 0.01,
            lr: 3e-4,
            schedule: SdeSchedule::train(),
            reward_source: RewardSource::Learned,
            std_guard: 1e-8,
            prompts_per_step: 16,
            adapter_rank: 4,
            adapter_alpha: 4.0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(LabError::Config(format!("group size {} < 2", self.group_size)));
        }
        if 2 * self.k > self.group_size {
            return Err(LabError::Config(format!(
                "2k = {} exceeds group size {}",
                2 * self.k,
                self.group_size
            )));
        }
        if !(self.clip_eps > 0.0) {
            return Err(LabError::Config(format!("clip range {} must be positive", self.clip_eps)));
        }
        if !(self.kl_coef >= 0.0) {
            return Err(LabError::Config(format!("KL coefficient {} must be >= 0", self.kl_coef)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LabError::Config(format!("learning rate {} invalid", self.lr)));
        }
        if !(self.std_guard >= 0.0) {
            return Err(LabError::Config("std guard must be >= 0".into()));
        }
        if self.prompts_per_step == 0 {
            return Err(LabError::Config("prompts per step must be positive".into()));
        }
        self.schedule.validate()
    }

    pub fn subset_size(&self) -> usize {
        if self.k == 0 {
            self.group_size
        } else {
            2 * self.k
        }
    }

    /// Policy evaluations spent on ratios per prompt per step.
    pub fn training_nfe_per_prompt(&self) -> usize {
        self.subset_size() * self.schedule.steps
    }
}

// ---------------------------------------------------------------------------
// Advantages

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advantages {
    /// Member indices by descending reward, ties by index.
    pub order: Vec<usize>,
    /// Selected members, ascending by index.
    pub subset: Vec<usize>,
    /// `Some` exactly on the subset.
    pub values: Vec<Option<f64>>,
    pub degenerate: bool,
}

pub fn rank_descending(rewards: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rewards.len()).collect();
    order.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]).then(a.cmp(&b)));
    order
}

/// Z-scores rewards over the top-`k` ∪ bottom-`k` subset (whole group for `k = 0`).
pub fn compute_advantages(rewards: &[f64], k: usize, std_guard: f64) -> Result<Advantages> {
    let g = rewards.len();
    if g == 0 {
        return Err(LabError::Domain("empty reward group".into()));
    }
    if 2 * k > g {
        return Err(LabError::Config(format!("2k = {} exceeds group size {g}", 2 * k)));
    }
    if let Some(bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(LabError::NonFinite(format!("reward {bad}")));
    }
    let order = rank_descending(rewards);
    let mut subset: Vec<usize> = if k == 0 {
        (0..g).collect()
    } else {
        order[..k].iter().chain(&order[g - k..]).copied().collect()
    };
    subset.sort_unstable();
    let selected: Vec<f64> = subset.iter().map(|&i| rewards[i]).collect();
    let m = mean(&selected);
    let s = pop_std(&selected);
    // Exact equality rather than `s == 0`: the std of equal values can round above zero.
    let degenerate = selected.iter().all(|&r| r == selected[0]);
    let mut values = vec![None; g];
    for &i in &subset {
        values[i] = Some(if degenerate { 0.0 } else { (rewards[i] - m) / (s + std_guard) });
    }
    Ok(Advantages {
        order,
        subset,
        values,
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// Rollouts

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub trajectory: Trajectory,
    pub scene: Scene,
    pub reward: f64,
    pub oracle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt: SpatialPrompt,
    pub cond: Vec<f64>,
    pub members: Vec<Member>,
    pub advantages: Option<Advantages>,
    /// Policy evaluations spent sampling, including retried members.
    pub sampling_nfe: usize,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.reward).collect()
    }

    pub fn oracle_fractions(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.oracle).collect()
    }

    pub fn assign_advantages(&mut self, k: usize, std_guard: f64) -> Result<&Advantages> {
        let adv = compute_advantages(&self.rewards(), k, std_guard)?;
        Ok(self.advantages.insert(adv))
    }
}

/// Samples `G` members in parallel; member `i` uses `stream.derive(i)` and is
/// retried on a further derived stream if its trajectory goes non-finite.
pub fn rollout_group<F: VelocityField + ?Sized, S: SceneScorer + ?Sized>(
    policy: &F,
    cond: &[f64],
    prompt: &SpatialPrompt,
    scorer: &S,
    config: &GrpoConfig,
    stream: &RngStream,
) -> Result<RolloutGroup> {
    config.validate()?;
    let steps = config.schedule.steps;
    let results: Vec<Result<(Member, usize)>> = (0..config.group_size)
        .into_par_iter()
        .map(|i| {
            let base = stream.derive(i as u64);
            let mut last_err = None;
            for attempt in 0..=MEMBER_RETRIES {
                let mut s = if attempt == 0 { base.clone() } else { base.derive(attempt as u64) };
                match sde_sample(policy, cond, &config.schedule, &mut s) {
                    Ok(trajectory) => {
                        let scene = trajectory.scene(prompt)?;
                        let reward = scorer.reward(prompt, &scene)?;
                        let oracle = oracle_score(&scene, prompt)?.fraction;
                        let member = Member {
                            trajectory,
                            scene,
                            reward,
                            oracle,
                        };
                        return Ok((member, (attempt + 1) * steps));
                    }
                    Err(e @ LabError::NonFinite(_)) => last_err = Some(e),
                    Err(e) => return Err(e),
                }
            }
            Err(last_err.unwrap_or_else(|| LabError::Generation("member sampling failed".into())))
        })
        .collect();
    let mut members = Vec::with_capacity(config.group_size);
    let mut sampling_nfe = 0;
    for r in results {
        let (m, nfe) = r?;
        members.push(m);
        sampling_nfe += nfe;
    }
    Ok(RolloutGroup {
        prompt: prompt.clone(),
        cond: cond.to_vec(),
        members,
        advantages: None,
        sampling_nfe,
    })
}

// ---------------------------------------------------------------------------
// Loss

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoLoss {
    pub loss: f64,
    pub surrogate: f64,
    pub kl: f64,
    /// Gradient w.r.t. the adapter factors, `[A0, B0, A1, B1, ...]`.
    pub grads: GradBundle,
    pub clipped: usize,
    pub ratio_flags: usize,
    /// Policy evaluations used for ratios (|S|·T per non-degenerate group).
    pub nfe: usize,
    pub terms: usize,
}

struct Partial {
    surrogate: f64,
    kl: f64,
    grads: GradBundle,
    clipped: usize,
    flags: usize,
    nfe: usize,
}

/// Clipped surrogate `min(ρA, clip(ρ, 1±ε)A)` and its derivative w.r.t. `ρ`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> (f64, f64, bool) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, adv, false)
    } else {
        (clipped, 0.0, true)
    }
}

/// Loss over all groups that carry non-degenerate advantages.
///
/// The old policy is the one that sampled the groups, so `logp_old` is read
/// from the recorded transition means. The reference policy is `base` without
/// the adapter.
pub fn grpo_loss(
    base: &VelocityNet,
    adapter: &LowRankAdapter,
    groups: &[RolloutGroup],
    config: &GrpoConfig,
) -> Result<GrpoLoss> {
    let policy = apply_adapter(base, adapter)?;
    let work: Vec<(&RolloutGroup, usize, f64)> = groups
        .iter()
        .filter_map(|g| g.advantages.as_ref().filter(|a| !a.degenerate).map(|a| (g, a)))
        .flat_map(|(g, a)| a.subset.iter().map(move |&i| (g, i, a.values[i].unwrap_or(0.0))))
        .collect();
    let terms: usize = work.iter().map(|(g, i, _)| g.members[*i].trajectory.steps.len()).sum();
    let zero = || GradBundle::zeros_like(&policy.mlp);
    if terms == 0 {
        return Ok(GrpoLoss {
            loss: 0.0,
            surrogate: 0.0,
            kl: 0.0,
            grads: adapter.project_grads(&base.mlp, &zero())?,
            clipped: 0,
            ratio_flags: 0,
            nfe: 0,
            terms: 0,
        });
    }
    let inv_n = 1.0 / terms as f64;
    let partials: Vec<Result<Partial>> = work
        .par_iter()
        .map(|&(group, i, adv)| {
            let traj = &group.members[i].trajectory;
            let mut p = Partial {
                surrogate: 0.0,
                kl: 0.0,
                grads: zero(),
                clipped: 0,
                flags: 0,
                nfe: 0,
            };
            for (k, step) in traj.steps.iter().enumerate() {
                let (x, x_next) = (&traj.states[k], &traj.states[k + 1]);
                let std = step.std();
                let var = std * std;
                let trace = policy.mlp.forward_trace(&policy.net_input(x, step.t, &group.cond)?)?;
                p.nfe += 1;
                let mean_theta = transition_mean(x, trace.output(), step.t, step.dt, step.sigma);
                let logp = gaussian_logpdf(x_next, &mean_theta, std)?;
                let logp_old = gaussian_logpdf(x_next, &step.mean, std)?;
                let mut log_ratio = logp - logp_old;
                if !log_ratio.is_finite() || log_ratio.abs() > LOG_RATIO_LIMIT {
                    p.flags += 1;
                    log_ratio = if log_ratio.is_nan() {
                        0.0
                    } else {
                        log_ratio.clamp(-LOG_RATIO_LIMIT, LOG_RATIO_LIMIT)
                    };
                }
                let ratio = log_ratio.exp();
                let (surr, dsurr_dratio, was_clipped) = clipped_surrogate(ratio, adv, config.clip_eps);
                p.surrogate += surr;
                p.clipped += was_clipped as usize;
                // d(-surr)/d(logp) = -dsurr/dratio · ratio; d(logp)/d(mean) = (x_next - mean)/var.
                let w_logp = -dsurr_dratio * ratio * inv_n / var;
                let mut d_mean: Vec<f64> = x_next
                    .iter()
                    .zip(&mean_theta)
                    .map(|(xn, m)| w_logp * (xn - m))
                    .collect();
                if config.kl_coef > 0.0 {
                    let v_ref = base.velocity(x, step.t, &group.cond)?;
                    let mean_ref = transition_mean(x, &v_ref, step.t, step.dt, step.sigma);
                    let gap: Vec<f64> = mean_theta.iter().zip(&mean_ref).map(|(a, b)| a - b).collect();
                    p.kl += gap.iter().map(|d| d * d).sum::<f64>() / (2.0 * var);
                    let w_kl = config.kl_coef * inv_n / var;
                    d_mean.iter_mut().zip(&gap).for_each(|(d, g)| *d += w_kl * g);
                }
                let gain = mean_velocity_gain(step.t, step.dt, step.sigma);
                let upstream: Vec<f64> = d_mean.iter().map(|d| d * gain).collect();
                policy.mlp.backward_accumulate(&trace, &upstream, &mut p.grads)?;
            }
            Ok(p)
        })
        .collect();
    let mut full = zero();
    let (mut surrogate, mut kl, mut clipped, mut flags, mut nfe) = (0.0, 0.0, 0, 0, 0);
    for p in partials {
        let p = p?;
        full.add_assign(&p.grads);
        surrogate += p.surrogate;
        kl += p.kl;
        clipped += p.clipped;
        flags += p.flags;
        nfe += p.nfe;
    }
    let surrogate = surrogate * inv_n;
    let kl = kl * inv_n;
    let loss = -surrogate + config.kl_coef * kl;
    if !loss.is_finite() || !full.is_finite() {
        return Err(LabError::NonFinite(format!("GRPO loss {loss}")));
    }
    Ok(GrpoLoss {
        loss,
        surrogate,
        kl,
        grads: adapter.project_grads(&base.mlp, &full)?,
        clipped,
        ratio_flags: flags,
        nfe,
        terms,
    })
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeStep {
    pub step: usize,
    pub groups: usize,
    pub skipped: usize,
    pub sampling: usize,
    pub training: usize,
}

impl NfeStep {
    pub fn sampling_per_prompt(&self) -> f64 {
        self.sampling as f64 / self.groups.max(1) as f64
    }

    /// Ratio evaluations per updated prompt; `None` if every group was skipped.
    pub fn training_per_prompt(&self) -> Option<usize> {
        let used = self.groups - self.skipped;
        (used > 0).then(|| self.training / used)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NfeLedger {
    pub steps: Vec<NfeStep>,
    pub total_sampling: usize,
    pub total_training: usize,
}

impl NfeLedger {
    pub fn record(&mut self, entry: NfeStep) {
        self.total_sampling += entry.sampling;
        self.total_training += entry.training;
        self.steps.push(entry);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoMetrics {
    pub step: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub oracle_rate: f64,
    pub kl: f64,
    pub loss: f64,
    pub nfe_sampling: f64,
    pub nfe_training: usize,
    pub degenerate_groups: usize,
    pub clipped: usize,
}

/// Mutable training state; everything needed to resume.
#[derive(Debug, Clone)]
pub struct GrpoState {
    pub adapter: LowRankAdapter,
    pub adam: Adam,
    pub step: usize,
    pub ledger: NfeLedger,
}

impl GrpoState {
    pub fn fresh(base: &VelocityNet, config: &GrpoConfig, stream: &mut RngStream) -> Result<Self> {
        let adapter = LowRankAdapter::new(&base.mlp, config.adapter_rank, config.adapter_alpha, stream)?;
        let adam = Adam::new(&adapter.parts());
        Ok(Self {
            adapter,
            adam,
            step: 0,
            ledger: NfeLedger::default(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct GrpoRun {
    pub history: Vec<GrpoMetrics>,
    /// Set when training stopped early; the state holds the last good adapter.
    pub aborted: Option<String>,
}

/// Runs one training step: rollouts, advantages, one adapter update.
pub fn grpo_step<S: SceneScorer + ?Sized>(
    base: &VelocityNet,
    state: &mut GrpoState,
    scorer: &S,
    prompts: &[SpatialPrompt],
    config: &GrpoConfig,
    stream: &RngStream,
) -> Result<GrpoMetrics> {
    config.validate()?;
    if prompts.is_empty() {
        return Err(LabError::Config("prompt pool is empty".into()));
    }
    let step = state.step;
    let mut s = stream.derive(step as u64);
    let chosen: Vec<&SpatialPrompt> = (0..config.prompts_per_step).map(|_| &prompts[s.index(prompts.len())]).collect();
    let policy = apply_adapter(base, &state.adapter)?;
    let mut groups = chosen
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let cond = policy.condition(p);
            rollout_group(&policy, &cond, p, scorer, config, &s.derive(j as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut degenerate = 0;
    for g in groups.iter_mut() {
        degenerate += g.assign_advantages(config.k, config.std_guard)?.degenerate as usize;
    }
    if degenerate == groups.len() {
        log::warn!("step {step}: every group had constant rewards; no update");
    }
    let out = grpo_loss(base, &state.adapter, &groups, config)?;
    state.adam.step(state.adapter.parts_mut(), &out.grads, config.lr)?;

    let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards()).collect();
    let oracle: Vec<f64> = groups.iter().flat_map(|g| g.oracle_fractions()).collect();
    let entry = NfeStep {
        step,
        groups: groups.len(),
        skipped: degenerate,
        sampling: groups.iter().map(|g| g.sampling_nfe).sum(),
        training: out.nfe,
    };
    state.ledger.record(entry);
    state.step += 1;
    Ok(GrpoMetrics {
        step,
        reward_mean: mean(&rewards),
        reward_std: pop_std(&rewards),
        oracle_rate: mean(&oracle),
        kl: out.kl,
        loss: out.loss,
        nfe_sampling: entry.sampling_per_prompt(),
        nfe_training: entry.training_per_prompt().unwrap_or(0),
        degenerate_groups: degenerate,
        clipped: out.clipped,
    })
}

/// Trains until `state.step == until`. A failing step leaves `state` at the
/// last completed step and is reported in `aborted`.
pub fn grpo_train<S: SceneScorer + ?Sized>(
    base: &VelocityNet,
    state: &mut GrpoState,
    scorer: &S,
    prompts: &[SpatialPrompt],
    config: &GrpoConfig,
    until: usize,
    stream: &RngStream,
    mut on_step: impl FnMut(&GrpoMetrics, &GrpoState),
) -> Result<GrpoRun> {
    config.validate()?;
    let mut history = Vec::new();
    let mut aborted = None;
    let mut consecutive_degenerate = 0;
    while state.step < until {
        let snapshot = state.clone();
        match grpo_step(base, state, scorer, prompts, config, stream) {
            Ok(m) => {
                consecutive_degenerate = if m.degenerate_groups == config.prompts_per_step {
                    consecutive_degenerate + 1
                } else {
                    0
                };
                if consecutive_degenerate == 5 {
                    log::warn!("five consecutive steps without a usable group");
                }
                on_step(&m, state);
                history.push(m);
            }
            Err(e) if e.is_numeric() => {
                *state = snapshot;
                aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(GrpoRun { history, aborted })
}

// ---------------------------------------------------------------------------
// Evaluation and diagnostics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub mean_oracle: f64,
    pub full_rate: f64,
    pub n_samples: usize,
}

/// Mean oracle fraction over `samples` SDE draws per prompt; prompt `j`
/// sample `i` uses `stream.derive(j).derive(i)`.
pub fn evaluate_policy<F: VelocityField + ?Sized>(
    policy: &F,
    cond_of: impl Fn(&SpatialPrompt) -> Vec<f64> + Sync,
    prompts: &[SpatialPrompt],
    schedule: &SdeSchedule,
    samples: usize,
    stream: &RngStream,
) -> Result<PolicyEval> {
    if prompts.is_empty() || samples == 0 {
        return Err(LabError::Config("policy evaluation needs prompts and samples".into()));
    }
    let scores: Vec<Result<f64>> = prompts
        .par_iter()
        .enumerate()
        .flat_map_iter(|(j, p)| {
            let cond = cond_of(p);
            let ps = stream.derive(j as u64);
            (0..samples)
                .map(|i| {
                    let traj = sde_sample(policy, &cond, schedule, &mut ps.derive(i as u64))?;
                    Ok(oracle_score(&traj.scene(p)?, p)?.fraction)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(PolicyEval {
        mean_oracle: mean(&scores),
        full_rate: scores.iter().filter(|&&f| f >= 1.0).count() as f64 / scores.len() as f64,
        n_samples: scores.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub threshold: f64,
    pub k: usize,
    pub rewards: Vec<f64>,
    pub oracle: Vec<f64>,
    pub high_quality: usize,
    /// High-quality members with negative advantage under full-group statistics.
    pub penalized_full: Vec<usize>,
    /// Same, under top-k/bottom-k statistics.
    pub penalized_topk: Vec<usize>,
}

/// Counts high-quality members (oracle ≥ threshold) that receive `A < 0`
/// with and without filtering, on one frozen group.
pub fn diagnose_group(rewards: &[f64], oracle: &[f64], k: usize, std_guard: f64, threshold: f64) -> Result<BiasReport> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(LabError::Config(format!("threshold {threshold} outside (0, 1]")));
    }
    if rewards.len() != oracle.len() {
        return Err(LabError::Shape("rewards and oracle fractions differ in length".into()));
    }
    let penalized = |adv: &Advantages| -> Vec<usize> {
        (0..rewards.len())
            .filter(|&i| oracle[i] >= threshold && adv.values[i].is_some_and(|a| a < 0.0))
            .collect()
    };
    let full = compute_advantages(rewards, 0, std_guard)?;
    let topk = compute_advantages(rewards, k, std_guard)?;
    Ok(BiasReport {
        threshold,
        k,
        rewards: rewards.to_vec(),
        oracle: oracle.to_vec(),
        high_quality: oracle.iter().filter(|&&o| o >= threshold).count(),
        penalized_full: penalized(&full),
        penalized_topk: penalized(&topk),
    })
}

pub fn diagnose_advantage_bias<F: VelocityField + ?Sized, S: SceneScorer + ?Sized>(
    policy: &F,
    cond: &[f64],
    prompt: &SpatialPrompt,
    scorer: &S,
    config: &GrpoConfig,
    threshold: f64,
    stream: &RngStream,
) -> Result<BiasReport> {
    let group = rollout_group(policy, cond, prompt, scorer, config, stream)?;
    diagnose_group(&group.rewards(), &group.oracle_fractions(), config.k, config.std_guard, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::OracleScorer;
    use crate::scene::{Predicate, RelationAtom};

    fn prompt() -> SpatialPrompt {
        SpatialPrompt::new(
            vec![0, 1, 2, 3],
            vec![
                RelationAtom::new(0, Predicate::LeftOf, 1),
                RelationAtom::new(2, Predicate::Above, 3),
            ],
        )
        .unwrap()
    }

    fn small_net(seed: u64) -> VelocityNet {
        VelocityNet::new(4, 12, &[16, 16], &mut RngStream::new(seed, 0)).unwrap()
    }

    fn small_config() -> GrpoConfig {
        GrpoConfig {
            group_size: 8,
            k: 2,
            prompts_per_step: 2,
            ..GrpoConfig::default()
        }
    }

    #[test]
    fn z_scores_of_three() {
        let a = compute_advantages(&[1.0, 2.0, 3.0], 0, 1e-8).unwrap();
        let v: Vec<f64> = a.values.iter().map(|v| v.unwrap()).collect();
        assert!((v[0] + 1.224_744_871).abs() < 1e-6);
        assert!(v[1].abs() < 1e-12);
        assert!((v[2] - 1.224_744_871).abs() < 1e-6);
        assert!(!a.degenerate);
    }

    #[test]
    fn constant_rewards_are_degenerate() {
        let a = compute_advantages(&[0.5; 6], 2, 1e-8).unwrap();
        assert!(a.degenerate);
        assert!(a.values.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn top_k_excludes_middle_ranks() {
        let rewards: Vec<f64> = (0..24).map(|i| ((i * 7) % 24) as f64).collect();
        let a = compute_advantages(&rewards, 6, 1e-8).unwrap();
        assert_eq!(a.subset.len(), 12);
        for &i in &a.order[6..18] {
            assert!(a.values[i].is_none());
        }
        for &i in a.order[..6].iter().chain(&a.order[18..]) {
            assert!(a.values[i].is_some());
        }
    }

    #[test]
    fn ties_rank_by_index() {
        assert_eq!(rank_descending(&[1.0, 2.0, 1.0, 2.0]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn advantage_errors() {
        assert!(compute_advantages(&[], 0, 1e-8).is_err());
        assert!(compute_advantages(&[1.0, 2.0], 2, 1e-8).is_err());
        assert!(compute_advantages(&[1.0, f64::NAN], 0, 1e-8).is_err());
    }

    #[test]
    fn clip_selection() {
        let (s, d, c) = clipped_surrogate(1.001, 1.0, 1e-4);
        assert!((s - 1.0001).abs() < 1e-15);
        assert_eq!(d, 0.0);
        assert!(c);
        let (s, _, c) = clipped_surrogate(1.001, -1.0, 1e-4);
        assert!((s + 1.001).abs() < 1e-15);
        assert!(!c);
        let (s, d, c) = clipped_surrogate(1.0, 2.0, 1e-4);
        assert_eq!((s, d, c), (2.0, 2.0, false));
    }

    #[test]
    fn equal_variance_kl() {
        // gap 0.1 in 1-D with variance 0.25.
        let gap: f64 = 0.1;
        assert!((gap * gap / (2.0 * 0.25) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn config_checks() {
        assert!(GrpoConfig::default().validate().is_ok());
        assert!(GrpoConfig { k: 13, ..GrpoConfig::default() }.validate().is_err());
        assert!(GrpoConfig { clip_eps: 0.0, ..GrpoConfig::default() }.validate().is_err());
        assert!(GrpoConfig { kl_coef: -1.0, ..GrpoConfig::default() }.validate().is_err());
        assert_eq!(GrpoConfig::default().training_nfe_per_prompt(), 72);
        assert_eq!(GrpoConfig { k: 0, ..GrpoConfig::default() }.training_nfe_per_prompt(), 144);
    }

    #[test]
    fn rollout_is_deterministic_and_counts_nfe() {
        let net = small_net(1);
        let cfg = GrpoConfig {
            reward_source: RewardSource::Oracle,
            ..GrpoConfig::default()
        };
        let cond = net.condition(&prompt());
        let a = rollout_group(&net, &cond, &prompt(), &OracleScorer, &cfg, &RngStream::new(2, 0)).unwrap();
        let b = rollout_group(&net, &cond, &prompt(), &OracleScorer, &cfg, &RngStream::new(2, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.members.len(), 24);
        assert_eq!(a.sampling_nfe, 144);
        assert!(a.rewards().iter().all(|r| (0.0..=1.0).contains(r)));
    }

    #[test]
    fn on_policy_loss_is_kl_only() {
        let net = small_net(3);
        let cfg = GrpoConfig { kl_coef: 0.0, ..small_config() };
        let mut s = RngStream::new(4, 0);
        let mut adapter = LowRankAdapter::new(&net.mlp, 2, 2.0, &mut s).unwrap();
        for (_, b) in adapter.factors.iter_mut() {
            b.data_mut().iter_mut().for_each(|v| *v = 0.05 * s.gauss());
        }
        let policy = apply_adapter(&net, &adapter).unwrap();
        let p = prompt();
        let cond = policy.condition(&p);
        let scorer = crate::reward::RewardNet::new(4, 12, &[8], &mut RngStream::new(5, 0)).unwrap();
        let mut g = rollout_group(&policy, &cond, &p, &scorer, &cfg, &RngStream::new(6, 0)).unwrap();
        g.assign_advantages(cfg.k, cfg.std_guard).unwrap();
        let out = grpo_loss(&net, &adapter, &[g.clone()], &cfg).unwrap();
        assert!(out.loss.abs() <= 1e-10, "{}", out.loss);
        assert_eq!(out.clipped, 0);
        assert_eq!(out.nfe, 4 * 6);

        let cfg_kl = GrpoConfig { kl_coef: 0.5, ..cfg };
        let out_kl = grpo_loss(&net, &adapter, &[g], &cfg_kl).unwrap();
        assert!(out_kl.kl > 0.0);
        assert!((out_kl.loss - 0.5 * out_kl.kl).abs() <= 1e-10);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        // Differentiate through logp_θ with the rollout frozen; keep ratios
        // inside the clip range by using a wide ε.
        let net = small_net(7);
        let cfg = GrpoConfig {
            kl_coef: 0.3,
            clip_eps: 10.0,
            ..small_config()
        };
        let mut s = RngStream::new(8, 0);
        let mut adapter = LowRankAdapter::new(&net.mlp, 2, 2.0, &mut s).unwrap();
        for (_, b) in adapter.factors.iter_mut() {
            b.data_mut().iter_mut().for_each(|v| *v = 0.05 * s.gauss());
        }
        let p = prompt();
        let cond = net.condition(&p);
        let policy = apply_adapter(&net, &adapter).unwrap();
        let mut g = rollout_group(&policy, &cond, &p, &OracleScorer, &cfg, &RngStream::new(9, 0)).unwrap();
        // Oracle rewards on an untrained net may be constant; use synthetic ones.
        for (i, m) in g.members.iter_mut().enumerate() {
            m.reward = (i as f64 * 0.37).sin();
        }
        g.assign_advantages(cfg.k, cfg.std_guard).unwrap();
        let groups = [g];
        // Perturb the adapter so ratios differ from one.
        let mut moved = adapter.clone();
        let mut flat = moved.flat();
        flat.iter_mut().for_each(|v| *v += 0.01 * s.gauss());
        moved.set_flat(&flat).unwrap();
        let out = grpo_loss(&net, &moved, &groups, &cfg).unwrap();
        let grad = out.grads.flat();
        let h = 1e-5;
        for i in (0..flat.len()).step_by(11) {
            let mut plus = moved.clone();
            let mut fp = flat.clone();
            fp[i] += h;
            plus.set_flat(&fp).unwrap();
            let mut minus = moved.clone();
            fp[i] -= 2.0 * h;
            minus.set_flat(&fp).unwrap();
            let lp = grpo_loss(&net, &plus, &groups, &cfg).unwrap().loss;
            let lm = grpo_loss(&net, &minus, &groups, &cfg).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1e-4), "coord {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn training_step_records_ledger() {
        let net = small_net(10);
        let cfg = small_config();
        let mut state = GrpoState::fresh(&net, &cfg, &mut RngStream::new(11, 0)).unwrap();
        let scorer = crate::reward::RewardNet::new(4, 12, &[8], &mut RngStream::new(12, 0)).unwrap();
        let prompts = vec![prompt()];
        let run = grpo_train(&net, &mut state, &scorer, &prompts, &cfg, 3, &RngStream::new(13, 0), |_, _| {}).unwrap();
        assert!(run.aborted.is_none());
        assert_eq!(run.history.len(), 3);
        assert_eq!(state.ledger.steps.len(), 3);
        for e in &state.ledger.steps {
            assert_eq!(e.training_per_prompt(), Some(4 * 6));
            assert_eq!(e.sampling, 2 * 8 * 6);
        }
        assert_eq!(run.history[0].nfe_training, 24);
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let net = small_net(14);
        let cfg = small_config();
        let scorer = crate::reward::RewardNet::new(4, 12, &[8], &mut RngStream::new(15, 0)).unwrap();
        let prompts = vec![prompt()];
        let stream = RngStream::new(16, 0);
        let fresh = || GrpoState::fresh(&net, &cfg, &mut RngStream::new(17, 0)).unwrap();
        let mut straight = fresh();
        grpo_train(&net, &mut straight, &scorer, &prompts, &cfg, 4, &stream, |_, _| {}).unwrap();
        let mut split = fresh();
        grpo_train(&net, &mut split, &scorer, &prompts, &cfg, 2, &stream, |_, _| {}).unwrap();
        grpo_train(&net, &mut split, &scorer, &prompts, &cfg, 4, &stream, |_, _| {}).unwrap();
        assert_eq!(straight.adapter, split.adapter);
    }

    #[test]
    fn diagnostic_counts() {
        // 20 perfect members with spread rewards, 4 poor ones.
        let rewards: Vec<f64> = (0..24).map(|i| if i < 20 { 1.0 + 0.05 * i as f64 } else { 0.2 }).collect();
        let oracle: Vec<f64> = (0..24).map(|i| if i < 20 { 1.0 } else { 0.5 }).collect();
        let r = diagnose_group(&rewards, &oracle, 6, 1e-8, 1.0).unwrap();
        assert_eq!(r.high_quality, 20);
        assert!(!r.penalized_full.is_empty());
        assert!(r.penalized_topk.len() <= r.penalized_full.len());
        let flat = diagnose_group(&[0.3; 24], &oracle, 6, 1e-8, 1.0).unwrap();
        assert!(flat.penalized_full.is_empty() && flat.penalized_topk.is_empty());
        assert!(diagnose_group(&rewards, &oracle, 6, 1e-8, 0.0).is_err());
    }

    #[test]
    fn policy_eval_is_deterministic() {
        let net = small_net(18);
        let prompts = vec![prompt()];
        let run = || {
            evaluate_policy(&net, |p| net.condition(p), &prompts, &SdeSchedule::eval(), 4, &RngStream::new(19, 0)).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.n_samples, 4);
    }
}
