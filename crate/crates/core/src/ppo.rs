//! Clipped-PPO policy updates and critic updates over whole episodes.
//!
//! All candidates of every turn contribute tokens to the surrogate loss; the
//! advantage of candidate i at turn t is its own lambda-weighted turn reward
//! plus the chosen chain's suffix return, minus the old value estimate. The
//! loss is token-mean normalized.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::critic::CriticParams;
use crate::episodes::EpisodeRollout;
use crate::error::{Error, Result};
use crate::model::{ModelGraph, PolicyParams};
use crate::tape::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CriticTarget {
    /// Lambda-weighted suffix return of the chosen chain.
    #[default]
    SuffixReturn,
    /// Best-of-N candidate turn reward.
    BestOfN,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PPOConfig {
    pub epsilon: f64,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub batch_episodes: usize,
    pub ppo_epochs: usize,
    pub gamma_rl: f64,
    pub n_candidates: usize,
    pub advantage_normalize: bool,
    pub critic_target: CriticTarget,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            epsilon: 0.1,
            policy_lr: 2e-5,
            critic_lr: 1e-5,
            batch_episodes: 4,
            ppo_epochs: 3,
            gamma_rl: 1.0,
            n_candidates: 8,
            advantage_normalize: false,
            critic_target: CriticTarget::SuffixReturn,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidConfig("epsilon must be in (0, 1)".into()));
        }
        if self.policy_lr <= 0.0 || self.critic_lr <= 0.0 {
            return Err(Error::InvalidConfig("learning rates must be > 0".into()));
        }
        if self.batch_episodes < 1 || self.n_candidates < 1 {
            return Err(Error::InvalidConfig(
                "batch_episodes and n_candidates must be >= 1".into(),
            ));
        }
        if self.gamma_rl != 1.0 {
            return Err(Error::InvalidConfig(
                "gamma_rl is fixed at 1.0; temporal weighting comes from the lambdas".into(),
            ));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer (decay 0.9/0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - Self::BETA1.powi(self.t as i32);
        let b2t = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// r_s = exp(logp_new_s - logp_old_s).
pub fn prob_ratios(logp_new: &[f64], logp_old: &[f64]) -> Result<Vec<f64>> {
    if logp_new.len() != logp_old.len() {
        return Err(Error::LengthMismatch {
            left: logp_new.len(),
            right: logp_old.len(),
        });
    }
    Ok(logp_new
        .iter()
        .zip(logp_old)
        .map(|(n, o)| (n - o).exp())
        .collect())
}

/// A^(t) = G^(t) - V_old^(t), optionally standardized across the slice
/// (mean 0, std 1, std floor 1e-8).
pub fn advantages(returns: &[f64], values_old: &[f64], normalize: bool) -> Result<Vec<f64>> {
    if returns.len() != values_old.len() {
        return Err(Error::LengthMismatch {
            left: returns.len(),
            right: values_old.len(),
        });
    }
    let mut adv: Vec<f64> = returns
        .iter()
        .zip(values_old)
        .map(|(g, v)| g - v)
        .collect();
    if normalize && !adv.is_empty() {
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-8);
        for a in &mut adv {
            *a = (*a - mean) / std;
        }
    }
    Ok(adv)
}

/// -(1/token_count) sum min(r A, clip(r, 1-eps, 1+eps) A).
pub fn ppo_clip_loss(ratios: &[f64], advantages: &[f64], epsilon: f64) -> Result<f64> {
    if ratios.is_empty() {
        return Err(Error::EmptyInput);
    }
    if ratios.len() != advantages.len() {
        return Err(Error::LengthMismatch {
            left: ratios.len(),
            right: advantages.len(),
        });
    }
    let total: f64 = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| {
            let clipped = r.clamp(1.0 - epsilon, 1.0 + epsilon);
            (r * a).min(clipped * a)
        })
        .sum();
    Ok(-total / ratios.len() as f64)
}

/// Per-iteration training metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub mean_reward: f64,
    pub cov: f64,
    pub foc: f64,
    pub rep: f64,
    pub ppo_loss: f64,
    pub critic_loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

pub type RolloutBatch = Vec<EpisodeRollout>;

struct FlatCandidate<'a> {
    history: &'a crate::history::History,
    tokens: &'a [u32],
    old_logp: &'a [f64],
    advantage: f64,
}

struct EpochStats {
    loss: f64,
    sum_ratio: f64,
    sum_kl: f64,
    clipped: usize,
    tokens: usize,
}

/// One PPO iteration over a collected batch: `ppo_epochs` passes of policy
/// surrogate descent plus a critic regression step per pass. On any
/// non-finite loss or gradient the parameters and optimizer state are rolled
/// back and a divergence error is returned.
pub fn train_iteration(
    batch: &RolloutBatch,
    policy: &mut PolicyParams,
    critic: &mut CriticParams,
    opt_policy: &mut Adam,
    opt_critic: &mut Adam,
    cfg: &PPOConfig,
) -> Result<TrainMetrics> {
    let snapshot = (
        policy.data.clone(),
        critic.data.clone(),
        opt_policy.clone(),
        opt_critic.clone(),
    );
    let rollback = |policy: &mut PolicyParams,
                        critic: &mut CriticParams,
                        opt_p: &mut Adam,
                        opt_c: &mut Adam,
                        what: String| {
        policy.data = snapshot.0.clone();
        critic.data = snapshot.1.clone();
        *opt_p = snapshot.2.clone();
        *opt_c = snapshot.3.clone();
        Error::NumericalDivergence(what)
    };

    // Flatten candidate turns in deterministic order and attach advantages.
    let mut raw_returns = Vec::new();
    let mut raw_values = Vec::new();
    let mut flat_meta = Vec::new();
    for (e, rollout) in batch.iter().enumerate() {
        for (t, group) in rollout.groups.iter().enumerate() {
            for (c, cand) in group.candidates.iter().enumerate() {
                if cand.tokens.is_empty() {
                    continue;
                }
                raw_returns.push(group.candidate_return(c));
                raw_values.push(group.v_old);
                flat_meta.push((e, t, c));
            }
        }
    }
    let advs = advantages(&raw_returns, &raw_values, cfg.advantage_normalize)?;
    let mut flat: Vec<FlatCandidate> = Vec::with_capacity(flat_meta.len());
    let mut group_of_flat: Vec<Vec<usize>> = Vec::new();
    {
        let mut group_index_map = std::collections::HashMap::new();
        for (i, &(e, t, c)) in flat_meta.iter().enumerate() {
            let group = &batch[e].groups[t];
            let gid = *group_index_map.entry((e, t)).or_insert_with(|| {
                group_of_flat.push(Vec::new());
                group_of_flat.len() - 1
            });
            group_of_flat[gid].push(i);
            flat.push(FlatCandidate {
                history: &group.history,
                tokens: &group.candidates[c].tokens,
                old_logp: &group.candidates[c].old_logp,
                advantage: advs[i],
            });
        }
    }
    let token_count: usize = flat.iter().map(|f| f.tokens.len()).sum();
    if token_count == 0 && cfg.ppo_epochs > 0 {
        return Err(Error::EmptyInput);
    }

    let mut last_stats = EpochStats {
        loss: 0.0,
        sum_ratio: token_count as f64, // ratios are 1 when no epochs run
        sum_kl: 0.0,
        clipped: 0,
        tokens: token_count.max(1),
    };
    let mut last_critic_loss = critic_batch_loss(batch, policy, critic, cfg)?;

    for epoch in 0..cfg.ppo_epochs {
        // ---- policy pass over turn groups (shared encoder per group) ----
        let results: Vec<Result<(Vec<f64>, EpochStats)>> = group_of_flat
            .par_iter()
            .map(|members| {
                let mut graph = ModelGraph::new(policy);
                let first = &flat[members[0]];
                let enc = graph.encode(first.history)?;
                let ctx = graph.prepare_cross(&enc);
                let mut group_sum = None;
                let mut stats = EpochStats {
                    loss: 0.0,
                    sum_ratio: 0.0,
                    sum_kl: 0.0,
                    clipped: 0,
                    tokens: 0,
                };
                for &i in members {
                    let cand = &flat[i];
                    let m = cand.tokens.len();
                    let lp = graph.log_prob_node(&ctx, cand.tokens)?;
                    let old = graph
                        .tape
                        .constant(Tensor::from_vec(m, 1, cand.old_logp.to_vec()));
                    let diff = graph.tape.sub(lp, old);
                    let ratio = graph.tape.exp(diff);
                    let adv = graph
                        .tape
                        .constant(Tensor::from_vec(m, 1, vec![cand.advantage; m]));
                    let surr1 = graph.tape.mul(ratio, adv);
                    let clipped = graph
                        .tape
                        .clamp(ratio, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon);
                    let surr2 = graph.tape.mul(clipped, adv);
                    let per_token = graph.tape.min2(surr1, surr2);
                    let cand_sum = graph.tape.sum(per_token);
                    group_sum = Some(match group_sum {
                        None => cand_sum,
                        Some(acc) => graph.tape.add(acc, cand_sum),
                    });
                    // Value-level stats.
                    let rvals = &graph.tape.value(ratio).data;
                    let lpvals = &graph.tape.value(lp).data;
                    for (k, &r) in rvals.iter().enumerate() {
                        stats.sum_ratio += r;
                        stats.sum_kl += cand.old_logp[k] - lpvals[k];
                        if (r - 1.0).abs() > cfg.epsilon {
                            stats.clipped += 1;
                        }
                    }
                    stats.tokens += m;
                }
                let group_sum = group_sum.expect("group has candidates");
                let obj = graph.tape.scale(group_sum, -1.0 / token_count as f64);
                stats.loss = graph.tape.value(obj).item();
                let grads = graph.backward(obj);
                Ok((grads.grad, stats))
            })
            .collect();

        let mut grad = vec![0.0; policy.data.len()];
        let mut stats = EpochStats {
            loss: 0.0,
            sum_ratio: 0.0,
            sum_kl: 0.0,
            clipped: 0,
            tokens: 0,
        };
        for r in results {
            let (g, s) = r?;
            for (acc, gv) in grad.iter_mut().zip(&g) {
                *acc += gv;
            }
            stats.loss += s.loss;
            stats.sum_ratio += s.sum_ratio;
            stats.sum_kl += s.sum_kl;
            stats.clipped += s.clipped;
            stats.tokens += s.tokens;
        }
        if !stats.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(rollback(
                policy,
                critic,
                opt_policy,
                opt_critic,
                format!("policy loss/gradient non-finite at epoch {epoch}"),
            ));
        }
        opt_policy.step(&mut policy.data, &grad, cfg.policy_lr);

        // ---- critic pass ----
        let (closs, cgrad) = critic_pass(batch, policy, critic, cfg)?;
        if !closs.is_finite() || cgrad.iter().any(|g| !g.is_finite()) {
            return Err(rollback(
                policy,
                critic,
                opt_policy,
                opt_critic,
                format!("critic loss/gradient non-finite at epoch {epoch}"),
            ));
        }
        opt_critic.step(&mut critic.data, &cgrad, cfg.critic_lr);
        last_critic_loss = closs;
        last_stats = stats;
    }

    let (mean_reward, cov, foc, rep) = batch_reward_stats(batch);
    let tokens = last_stats.tokens.max(1) as f64;
    Ok(TrainMetrics {
        mean_reward,
        cov,
        foc,
        rep,
        ppo_loss: last_stats.loss,
        critic_loss: last_critic_loss,
        mean_ratio: last_stats.sum_ratio / tokens,
        clip_fraction: last_stats.clipped as f64 / tokens,
        approx_kl: last_stats.sum_kl / tokens,
    })
}

fn critic_target(group: &crate::episodes::TurnGroup, cfg: &PPOConfig) -> f64 {
    match cfg.critic_target {
        CriticTarget::SuffixReturn => group.g_chain,
        CriticTarget::BestOfN => group
            .candidates
            .iter()
            .map(|c| c.reward.r_turn)
            .fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Batch-mean critic loss and its gradient with respect to the head
/// parameters (encoder frozen).
fn critic_pass(
    batch: &RolloutBatch,
    policy: &PolicyParams,
    critic: &CriticParams,
    cfg: &PPOConfig,
) -> Result<(f64, Vec<f64>)> {
    let b = batch.len().max(1) as f64;
    let results: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_iter()
        .map(|rollout| {
            let mut tape = Tape::new(critic.data.len());
            let mut episode_loss = None;
            for group in &rollout.groups {
                let (states, valid) = crate::model::encode(policy, &group.history)?;
                let rows = states.len();
                let cols = states[0].len();
                let mut data = Vec::with_capacity(rows * cols);
                for s in &states {
                    data.extend_from_slice(s);
                }
                let enc = tape.constant(Tensor::from_vec(rows, cols, data));
                let v = crate::critic::value_node(&mut tape, critic, enc, &valid);
                let target = tape.scalar(critic_target(group, cfg));
                let d = tape.sub(v, target);
                let sq = tape.mul(d, d);
                episode_loss = Some(match episode_loss {
                    None => sq,
                    Some(acc) => tape.add(acc, sq),
                });
            }
            let episode_loss = episode_loss.expect("episode has turns");
            let scaled = tape.scale(episode_loss, 1.0 / b);
            let grads = tape.backward(scaled);
            Ok((tape.value(scaled).item(), grads.grad))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; critic.data.len()];
    for r in results {
        let (l, g) = r?;
        loss += l;
        for (acc, gv) in grad.iter_mut().zip(&g) {
            *acc += gv;
        }
    }
    Ok((loss, grad))
}

fn critic_batch_loss(
    batch: &RolloutBatch,
    policy: &PolicyParams,
    critic: &CriticParams,
    cfg: &PPOConfig,
) -> Result<f64> {
    Ok(critic_pass(batch, policy, critic, cfg)?.0)
}

fn batch_reward_stats(batch: &RolloutBatch) -> (f64, f64, f64, f64) {
    let mut mean_reward = 0.0;
    let mut cov = 0.0;
    let mut foc = 0.0;
    let mut rep = 0.0;
    let mut turns = 0usize;
    for rollout in batch {
        mean_reward += rollout.episode.episodic_reward();
        for turn in &rollout.episode.turns {
            cov += turn.reward.cov;
            foc += turn.reward.foc;
            rep += turn.reward.rep;
            turns += 1;
        }
    }
    let b = batch.len().max(1) as f64;
    let t = turns.max(1) as f64;
    (mean_reward / b, cov / t, foc / t, rep / t)
}
