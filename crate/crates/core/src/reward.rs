//! Per-turn self-supervised reward from aggregated cross-attention, and
//! lambda-weighted cumulative returns.
//!
//! A turn's reward is `alpha*cov + beta*foc - gamma*rep`:
//! coverage of salient history positions, negative mean attention entropy
//! (optionally floored per turn), and the fraction of response n-grams
//! already present in the history.

use serde::{Deserialize, Serialize};

use crate::attn::AggregatedAttention;
use crate::error::{Error, Result};
use crate::history::History;
use crate::text::SalientSet;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// n of the history-repetition n-gram penalty.
    pub ngram_n: usize,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            alpha: 1.0,
            beta: 0.5,
            gamma: 1.0,
            ngram_n: 3,
        }
    }
}

/// Which denominator normalizes the repetition count. The n-gram count keeps
/// the value in [0, 1]; the response-length variant is selectable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RepDenominator {
    #[default]
    NgramCount,
    ResponseLen,
}

/// Per-turn entropy floor delta_t = delta0 + kappa * (t - 1), applied to the
/// entropy value inside `foc` only; attention rows are never altered.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClampConfig {
    pub enabled: bool,
    pub delta0: f64,
    pub kappa: f64,
}

impl Default for ClampConfig {
    fn default() -> Self {
        ClampConfig {
            enabled: true,
            delta0: 0.5,
            kappa: 0.1,
        }
    }
}

impl ClampConfig {
    pub fn disabled() -> Self {
        ClampConfig {
            enabled: false,
            delta0: 0.0,
            kappa: 0.0,
        }
    }

    pub fn floor(&self, turn: usize) -> f64 {
        self.delta0 + self.kappa * (turn as f64 - 1.0)
    }
}

/// All reward components of one turn.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub cov: f64,
    pub foc: f64,
    pub rep: f64,
    pub r_turn: f64,
    pub clamped_steps: usize,
    /// Degenerate zero-length response; all components defined as 0.
    #[serde(default)]
    pub empty_response: bool,
}

impl RewardBreakdown {
    fn degenerate() -> Self {
        RewardBreakdown {
            cov: 0.0,
            foc: 0.0,
            rep: 0.0,
            r_turn: 0.0,
            clamped_steps: 0,
            empty_response: true,
        }
    }
}

/// Per-turn weights for the cumulative return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnWeights {
    pub lambdas: Vec<f64>,
}

impl ReturnWeights {
    pub fn uniform(turns: usize) -> Self {
        ReturnWeights {
            lambdas: vec![1.0; turns],
        }
    }

    /// Uniform weights with the final turn weighted `final_weight` (the
    /// chain-of-thought answer emphasis).
    pub fn final_weighted(turns: usize, final_weight: f64) -> Self {
        let mut lambdas = vec![1.0; turns];
        if let Some(last) = lambdas.last_mut() {
            *last = final_weight;
        }
        ReturnWeights { lambdas }
    }
}

/// Return-weighting policy: uniform lambdas, or uniform with an emphasized
/// final turn (the chain-of-thought answer weighting).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    #[default]
    Uniform,
    FinalWeighted,
}

/// Everything the reward computation needs, bundled for rollouts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardConfig {
    pub weights: RewardWeights,
    pub clamp: ClampConfig,
    pub rep_denominator: RepDenominator,
    pub lambda_mode: LambdaMode,
    pub lambda_final: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            weights: RewardWeights::default(),
            clamp: ClampConfig::default(),
            rep_denominator: RepDenominator::default(),
            lambda_mode: LambdaMode::default(),
            lambda_final: 2.0,
        }
    }
}

impl RewardConfig {
    pub fn return_weights(&self, turns: usize) -> ReturnWeights {
        match self.lambda_mode {
            LambdaMode::Uniform => ReturnWeights::uniform(turns),
            LambdaMode::FinalWeighted => ReturnWeights::final_weighted(turns, self.lambda_final),
        }
    }
}

/// Mean attention mass on salient positions, normalized by response length
/// and salient-set size. Always in [0, 1/|I|].
pub fn coverage(attn: &AggregatedAttention, salient: &SalientSet) -> Result<f64> {
    if salient.is_empty() {
        return Err(Error::EmptySalientSet);
    }
    assert!(attn.steps >= 1, "coverage needs at least one decoding step");
    let mut total = 0.0;
    for row in attn.rows() {
        for &j in salient.indices() {
            total += row[j];
        }
    }
    Ok(total / (attn.steps as f64 * salient.len() as f64))
}

/// Natural-log entropy of a probability row, with 0 ln 0 = 0.
pub fn attention_entropy(row: &[f64]) -> Result<f64> {
    let mut h = 0.0;
    for &p in row {
        if p < 0.0 {
            return Err(Error::InvalidProbabilityRow);
        }
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h)
}

/// Applies the per-turn entropy floor; identity when disabled.
/// Returns the effective entropy and whether clamping fired.
pub fn clamp_entropy(h: f64, turn: usize, cfg: &ClampConfig) -> (f64, bool) {
    if !cfg.enabled {
        return (h, false);
    }
    let floor = cfg.floor(turn);
    if h < floor {
        (floor, true)
    } else {
        (h, false)
    }
}

/// Negative mean (floored) entropy over the turn's decoding steps, plus the
/// number of steps whose entropy was clamped.
pub fn focus(
    attn: &AggregatedAttention,
    turn: usize,
    cfg: &ClampConfig,
) -> Result<(f64, usize)> {
    assert!(attn.steps >= 1, "focus needs at least one decoding step");
    let mut sum = 0.0;
    let mut clamped = 0;
    for row in attn.rows() {
        let h = attention_entropy(row)?;
        let (eff, fired) = clamp_entropy(h, turn, cfg);
        if fired {
            clamped += 1;
        }
        sum += eff;
    }
    Ok((-sum / attn.steps as f64, clamped))
}

/// Fraction of response n-grams (with multiplicity) that occur contiguously
/// anywhere in the history. Windows containing a SUMMARY pseudo-token never
/// match. Responses shorter than n score 0.
pub fn rep_hist(response: &[u32], history: &History, n: usize) -> f64 {
    rep_hist_with(response, history, n, RepDenominator::NgramCount)
}

pub fn rep_hist_with(
    response: &[u32],
    history: &History,
    n: usize,
    denom: RepDenominator,
) -> f64 {
    assert!(n >= 1, "n-gram order must be at least 1");
    if response.len() < n {
        return 0.0;
    }
    let hist_ids: Vec<Option<u32>> = (0..history.len()).map(|p| history.id_at(p)).collect();
    let mut hist_ngrams: std::collections::HashSet<&[Option<u32>]> =
        std::collections::HashSet::new();
    for window in hist_ids.windows(n) {
        if window.iter().all(|t| t.is_some()) {
            hist_ngrams.insert(window);
        }
    }
    let resp_ids: Vec<Option<u32>> = response.iter().map(|&id| Some(id)).collect();
    let mut hits = 0usize;
    let total = response.len() - n + 1;
    for window in resp_ids.windows(n) {
        if hist_ngrams.contains(window) {
            hits += 1;
        }
    }
    let denominator = match denom {
        RepDenominator::NgramCount => total.max(1) as f64,
        RepDenominator::ResponseLen => response.len().max(1) as f64,
    };
    hits as f64 / denominator
}

/// alpha*cov + beta*foc - gamma*rep, in f64.
pub fn turn_reward(cov: f64, foc: f64, rep: f64, w: &RewardWeights) -> f64 {
    w.alpha * cov + w.beta * foc - w.gamma * rep
}

/// Full breakdown for one turn. A zero-length response yields the degenerate
/// all-zero breakdown (every component is a mean over decoding steps).
pub fn compute_breakdown(
    attn: &AggregatedAttention,
    salient: &SalientSet,
    response: &[u32],
    history: &History,
    turn: usize,
    w: &RewardWeights,
    clamp: &ClampConfig,
    denom: RepDenominator,
) -> Result<RewardBreakdown> {
    if response.is_empty() || attn.steps == 0 {
        return Ok(RewardBreakdown::degenerate());
    }
    let cov = coverage(attn, salient)?;
    let (foc, clamped_steps) = focus(attn, turn, clamp)?;
    let rep = rep_hist_with(response, history, w.ngram_n, denom);
    Ok(RewardBreakdown {
        cov,
        foc,
        rep,
        r_turn: turn_reward(cov, foc, rep, w),
        clamped_steps,
        empty_response: false,
    })
}

/// Suffix returns G^(t) = sum_{u=t..T} lambda_u R^(u), accumulated
/// right-to-left so the recursion G^(t) = lambda_t R^(t) + G^(t+1) holds
/// exactly in f64.
pub fn cumulative_returns(rewards: &[f64], weights: &ReturnWeights) -> Result<Vec<f64>> {
    if rewards.len() != weights.lambdas.len() {
        return Err(Error::LambdaLengthMismatch {
            lambdas: weights.lambdas.len(),
            rewards: rewards.len(),
        });
    }
    let mut returns = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = weights.lambdas[t] * rewards[t] + acc;
        returns[t] = acc;
    }
    Ok(returns)
}

/// One aggregated reasoning step of a chain-of-thought rollout: the attention
/// row produced while generating `token`, over the history frozen at the
/// enclosing block's start.
#[derive(Debug, Clone)]
pub struct CotStepCapture {
    pub row: Vec<f64>,
    pub token: u32,
}

/// Groups reasoning steps into consecutive blocks of `block` tokens (last
/// block may be short) and scores each block as one turn against the history
/// frozen at its start; the final answer forms its own block. `contexts`
/// holds one (history, salient set) per block, answer context last.
pub fn block_checkpoint_rewards(
    steps: &[CotStepCapture],
    answer: &CotStepCapture,
    block: usize,
    contexts: &[(History, SalientSet)],
    w: &RewardWeights,
    clamp: &ClampConfig,
    denom: RepDenominator,
) -> Result<Vec<RewardBreakdown>> {
    assert!(block >= 1, "block size must be at least 1");
    let reasoning_blocks = steps.len().div_ceil(block);
    let n_blocks = reasoning_blocks + 1;
    if contexts.len() != n_blocks {
        return Err(Error::LengthMismatch {
            left: contexts.len(),
            right: n_blocks,
        });
    }
    let mut out = Vec::with_capacity(n_blocks);
    for (b, chunk) in steps.chunks(block).enumerate() {
        let (history, salient) = &contexts[b];
        let rows: Vec<Vec<f64>> = chunk.iter().map(|s| s.row.clone()).collect();
        for row in &rows {
            if row.len() != history.len() {
                return Err(Error::AttentionShapeMismatch {
                    row_len: row.len(),
                    hist_len: history.len(),
                });
            }
        }
        let attn = AggregatedAttention::from_rows(rows, 1, 1);
        let tokens: Vec<u32> = chunk.iter().map(|s| s.token).collect();
        out.push(compute_breakdown(
            &attn,
            salient,
            &tokens,
            history,
            b + 1,
            w,
            clamp,
            denom,
        )?);
    }
    let (history, salient) = &contexts[n_blocks - 1];
    if answer.row.len() != history.len() {
        return Err(Error::AttentionShapeMismatch {
            row_len: answer.row.len(),
            hist_len: history.len(),
        });
    }
    let attn = AggregatedAttention::from_rows(vec![answer.row.clone()], 1, 1);
    out.push(compute_breakdown(
        &attn,
        salient,
        &[answer.token],
        history,
        n_blocks,
        w,
        clamp,
        denom,
    )?);
    Ok(out)
}
