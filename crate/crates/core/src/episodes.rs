//! Multi-turn dialogue and chain-of-thought rollouts against synthetic
//! environments, with attention capture and reward assembly.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attn::{aggregate, write_attention_dump, AggregatedAttention, AttentionRecord, CaptureBuffer};
use crate::critic::{self, CriticParams};
use crate::error::{Error, Result};
use crate::history::{prune_history, truncate_history, History};
use crate::model::{self, DecodeSession, PolicyParams};
use crate::reward::{compute_breakdown, cumulative_returns, RewardBreakdown, RewardConfig};
use crate::sample::{sample_token, SamplerConfig};
use crate::text::{compute_idf, select_keywords, select_salient, select_salient_in, IdfTable, SalientSet, TokenSeq, Vocab, BOS, EOS, PAD, SEP, UNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeKind {
    Dialogue,
    Cot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SalientScope {
    /// Salient tokens chosen over the whole history.
    #[default]
    FullHistory,
    /// Restricted to the current prompt's positions (the "no history
    /// coverage" ablation).
    CurrentPrompt,
}

/// How salient positions are chosen each turn.
#[derive(Debug, Clone)]
pub enum SalienceMode {
    IdfTopK { k: usize },
    Keywords { ids: Vec<u32> },
}

/// Resolved rollout configuration (environment-independent knobs).
#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub kind: EpisodeKind,
    /// Dialogue turns per episode.
    pub turns: usize,
    /// Chain-of-thought checkpoint block size.
    pub block: usize,
    pub max_response_tokens: usize,
    pub cot_max_reasoning: usize,
    pub salience: SalienceMode,
    pub scope: SalientScope,
    /// Final decoder layers averaged into the attention signal.
    pub l_prime: usize,
    /// Forbid EOS during response/reasoning sampling (fixed-length turns).
    pub ban_eos: bool,
    pub prune_max_len: usize,
    pub truncate_m: usize,
    pub mass_floor: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            kind: EpisodeKind::Dialogue,
            turns: 3,
            block: 5,
            max_response_tokens: 6,
            cot_max_reasoning: 20,
            salience: SalienceMode::IdfTopK { k: 8 },
            scope: SalientScope::FullHistory,
            l_prime: 1,
            ban_eos: true,
            prune_max_len: 128,
            truncate_m: 64,
            mass_floor: 1e-3,
        }
    }
}

/// One generated candidate: tokens plus the raw per-layer/head capture.
pub struct GeneratedTurn {
    pub tokens: TokenSeq,
    pub captures: Vec<AttentionRecord>,
    /// Teacher-forced log-probs of `tokens` under the generating snapshot.
    pub logp: Vec<f64>,
    /// Length cap reached without EOS (flagged, not an error).
    pub hit_max_len: bool,
}

/// Token-level constraints applied while sampling.
#[derive(Debug, Clone, Default)]
pub struct SampleConstraints {
    pub ban: Vec<u32>,
    pub allow_only: Option<Vec<u32>>,
}

/// A policy as the rollout machinery sees it. `Ctx` carries whatever the
/// agent precomputes once per turn (encoder states for the real model).
pub trait Agent: Sync {
    type Ctx: Sync;

    fn turn_ctx(&self, history: &History) -> Result<Self::Ctx>;
    fn generate(
        &self,
        ctx: &Self::Ctx,
        sampler: &SamplerConfig,
        max_tokens: usize,
        constraints: &SampleConstraints,
        rng: &mut ChaCha8Rng,
    ) -> Result<GeneratedTurn>;
    fn value(&self, ctx: &Self::Ctx) -> Result<f64>;
    /// (layers, heads) of the capture stream.
    fn attn_shape(&self) -> (usize, usize);
    /// Encoder states for truncation summaries.
    fn encoder_states(&self, history: &History) -> Result<Vec<Vec<f64>>>;
    /// Longest history the agent can condition on.
    fn max_history_len(&self) -> usize;
}

/// The trained policy + critic pair.
pub struct ModelAgent<'a> {
    pub policy: &'a PolicyParams,
    pub critic: &'a CriticParams,
}

pub struct ModelTurnCtx {
    states: Vec<Vec<f64>>,
    valid: Vec<bool>,
    history: History,
}

impl<'a> Agent for ModelAgent<'a> {
    type Ctx = ModelTurnCtx;

    fn turn_ctx(&self, history: &History) -> Result<ModelTurnCtx> {
        let (states, valid) = model::encode(self.policy, history)?;
        Ok(ModelTurnCtx {
            states,
            valid,
            history: history.clone(),
        })
    }

    fn generate(
        &self,
        ctx: &ModelTurnCtx,
        sampler: &SamplerConfig,
        max_tokens: usize,
        constraints: &SampleConstraints,
        rng: &mut ChaCha8Rng,
    ) -> Result<GeneratedTurn> {
        let mut session = DecodeSession::new(self.policy, &ctx.states, ctx.valid.clone());
        let mut prefix = vec![BOS];
        let mut tokens = Vec::new();
        let mut captures = Vec::new();
        let mut hit_max_len = true;
        while tokens.len() < max_tokens {
            let out = session.step(&prefix)?;
            let mut logits = out.logits;
            for &b in &constraints.ban {
                logits[b as usize] = f64::NEG_INFINITY;
            }
            if let Some(allowed) = &constraints.allow_only {
                for (i, l) in logits.iter_mut().enumerate() {
                    if !allowed.contains(&(i as u32)) {
                        *l = f64::NEG_INFINITY;
                    }
                }
            }
            let tok = sample_token(&logits, sampler, rng);
            if tok == EOS {
                hit_max_len = false;
                break;
            }
            tokens.push(tok);
            captures.extend(out.captures);
            prefix.push(tok);
        }
        let logp = if tokens.is_empty() {
            Vec::new()
        } else {
            session.log_probs(&tokens)?
        };
        Ok(GeneratedTurn {
            tokens,
            captures,
            logp,
            hit_max_len,
        })
    }

    fn value(&self, ctx: &ModelTurnCtx) -> Result<f64> {
        if ctx.history.is_empty() {
            return Err(Error::EmptyHistoryForCritic);
        }
        Ok(critic::value_from_states(self.critic, &ctx.states, &ctx.valid))
    }

    fn attn_shape(&self) -> (usize, usize) {
        (self.policy.config.layers, self.policy.config.heads)
    }

    fn encoder_states(&self, history: &History) -> Result<Vec<Vec<f64>>> {
        Ok(model::encode(self.policy, history)?.0)
    }

    fn max_history_len(&self) -> usize {
        self.policy.config.max_len
    }
}

/// Test/diagnostic policy that always attends one-hot to history position 0
/// (the attention-collapse scenario) and emits tokens uniformly over a fixed
/// content range.
pub struct CollapseStubAgent {
    pub layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
}

pub struct StubCtx {
    hist_len: usize,
}

impl Agent for CollapseStubAgent {
    type Ctx = StubCtx;

    fn turn_ctx(&self, history: &History) -> Result<StubCtx> {
        Ok(StubCtx {
            hist_len: history.len(),
        })
    }

    fn generate(
        &self,
        ctx: &StubCtx,
        _sampler: &SamplerConfig,
        max_tokens: usize,
        constraints: &SampleConstraints,
        rng: &mut ChaCha8Rng,
    ) -> Result<GeneratedTurn> {
        let lo = crate::text::RESERVED as u32;
        let hi = self.vocab_size as u32;
        let mut tokens = Vec::new();
        let mut captures = Vec::new();
        for step in 0..max_tokens {
            let tok = loop {
                let t = rng.gen_range(lo..hi);
                if !constraints.ban.contains(&t) {
                    break t;
                }
            };
            tokens.push(tok);
            for layer in 0..self.layers {
                for head in 0..self.heads {
                    let mut row = vec![0.0; ctx.hist_len];
                    row[0] = 1.0;
                    captures.push(AttentionRecord {
                        layer,
                        head,
                        step,
                        row,
                    });
                }
            }
        }
        let p = (1.0 / self.vocab_size as f64).ln();
        let logp = vec![p; tokens.len()];
        Ok(GeneratedTurn {
            tokens,
            captures,
            logp,
            hit_max_len: true,
        })
    }

    fn value(&self, _ctx: &StubCtx) -> Result<f64> {
        Ok(0.0)
    }

    fn attn_shape(&self) -> (usize, usize) {
        (self.layers, self.heads)
    }

    fn encoder_states(&self, history: &History) -> Result<Vec<Vec<f64>>> {
        Ok(vec![vec![0.0]; history.len()])
    }

    fn max_history_len(&self) -> usize {
        usize::MAX
    }
}

// ---------------------------------------------------------------------------
// Environments
// ---------------------------------------------------------------------------

/// Rule-based dialogue environment. Keywords are rare across the reference
/// corpus (high IDF) and injected into every user prompt; fillers are common
/// (low IDF). A policy that attends to keyword positions earns coverage.
pub struct DialogueEnv {
    pub vocab: Vocab,
    pub idf: IdfTable,
    keyword_ids: Vec<u32>,
    filler_ids: Vec<u32>,
}

impl DialogueEnv {
    pub fn new(n_keywords: usize, n_fillers: usize) -> Self {
        let keywords: Vec<String> = (0..n_keywords).map(|i| format!("kw{i}")).collect();
        let fillers: Vec<String> = (0..n_fillers).map(|i| format!("f{i}")).collect();
        let vocab = Vocab::new(keywords.iter().chain(fillers.iter()));
        let keyword_ids: Vec<u32> = keywords.iter().map(|t| vocab.id(t).unwrap()).collect();
        let filler_ids: Vec<u32> = fillers.iter().map(|t| vocab.id(t).unwrap()).collect();
        // Reference corpus: fillers in every document, each keyword in one.
        let mut corpus: Vec<TokenSeq> = Vec::new();
        for (i, &kw) in keyword_ids.iter().enumerate() {
            let mut doc = filler_ids.clone();
            doc.push(kw);
            // Stagger filler order so documents are not identical.
            doc.rotate_left(i % filler_ids.len().max(1));
            corpus.push(doc);
        }
        for _ in 0..8 {
            corpus.push(filler_ids.clone());
        }
        let idf = compute_idf(&corpus, &vocab).expect("non-empty corpus");
        DialogueEnv {
            vocab,
            idf,
            keyword_ids,
            filler_ids,
        }
    }

    pub fn keyword_ids(&self) -> &[u32] {
        &self.keyword_ids
    }

    /// Opening user prompt: 4-8 tokens mixing keywords and fillers.
    pub fn initial_prompt(&self, rng: &mut ChaCha8Rng) -> TokenSeq {
        let total = rng.gen_range(4..=8usize);
        let n_kw = rng.gen_range(2..=3usize).min(total);
        let mut prompt = Vec::with_capacity(total);
        for _ in 0..n_kw {
            prompt.push(*self.keyword_ids.choose(rng).unwrap());
        }
        while prompt.len() < total {
            prompt.push(*self.filler_ids.choose(rng).unwrap());
        }
        prompt.shuffle(rng);
        prompt
    }

    /// Rule-based follow-up: one token uniformly sampled from the most
    /// recent response, 1-3 fresh keywords, fillers up to 4-8 tokens total.
    pub fn simulate_user_turn(&self, history: &History, rng: &mut ChaCha8Rng) -> Result<TokenSeq> {
        let mut latest_turn = None;
        let mut last_response: Vec<u32> = Vec::new();
        for entry in history.entries() {
            if let crate::history::HistEntry::Tok {
                id,
                origin: crate::history::Origin::Response { turn },
            } = entry
            {
                if latest_turn != Some(*turn) {
                    latest_turn = Some(*turn);
                    last_response.clear();
                }
                last_response.push(*id);
            }
        }
        if latest_turn.is_none() {
            return Err(Error::EmptyInput);
        }
        let total = rng.gen_range(4..=8usize);
        let n_kw = rng.gen_range(1..=3usize).min(total - 1);
        let mut prompt = Vec::with_capacity(total);
        match last_response.choose(rng) {
            Some(&tok) => prompt.push(tok),
            None => prompt.push(*self.keyword_ids.choose(rng).unwrap()),
        }
        for _ in 0..n_kw {
            prompt.push(*self.keyword_ids.choose(rng).unwrap());
        }
        while prompt.len() < total {
            prompt.push(*self.filler_ids.choose(rng).unwrap());
        }
        prompt.shuffle(rng);
        Ok(prompt)
    }
}

/// Synthetic arithmetic-chain environment: prompts ask for the sum of small
/// operands; ground-truth reasoning is the sequence of partial sums.
pub struct CotEnv {
    pub vocab: Vocab,
    pub idf: IdfTable,
    number_ids: Vec<u32>,
    sum_id: u32,
    ans_id: u32,
}

/// Maximum representable answer: 4 operands of at most 9.
pub const COT_MAX_NUMBER: u32 = 36;

#[derive(Debug, Clone)]
pub struct CotProblem {
    pub operands: Vec<u32>,
    /// "sum SEP o1 o2 ..." as token ids.
    pub prompt: TokenSeq,
    /// Ground-truth partial sums (values).
    pub partials: Vec<u32>,
    pub answer_value: u32,
    pub answer_token: u32,
}

impl CotEnv {
    pub fn new() -> Self {
        let mut content: Vec<String> = vec!["sum".into(), "ans".into()];
        content.extend((1..=COT_MAX_NUMBER).map(|n| n.to_string()));
        let vocab = Vocab::new(content.iter());
        let number_ids: Vec<u32> = (1..=COT_MAX_NUMBER)
            .map(|n| vocab.id(&n.to_string()).unwrap())
            .collect();
        let sum_id = vocab.id("sum").unwrap();
        let ans_id = vocab.id("ans").unwrap();
        // Corpus: "sum"/"ans" everywhere, each number in a single document.
        let mut corpus: Vec<TokenSeq> = Vec::new();
        for &n in &number_ids {
            corpus.push(vec![sum_id, ans_id, n]);
        }
        let idf = compute_idf(&corpus, &vocab).expect("non-empty corpus");
        CotEnv {
            vocab,
            idf,
            number_ids,
            sum_id,
            ans_id,
        }
    }

    pub fn number_ids(&self) -> &[u32] {
        &self.number_ids
    }

    pub fn ans_id(&self) -> u32 {
        self.ans_id
    }

    fn number_token(&self, value: u32) -> u32 {
        self.number_ids[(value - 1) as usize]
    }

    pub fn generate_problem(
        &self,
        rng: &mut ChaCha8Rng,
        n_operands: (usize, usize),
        operand_range: (u32, u32),
    ) -> CotProblem {
        let n = rng.gen_range(n_operands.0..=n_operands.1);
        let operands: Vec<u32> = (0..n)
            .map(|_| rng.gen_range(operand_range.0..=operand_range.1))
            .collect();
        let mut partials = Vec::with_capacity(n);
        let mut acc = 0;
        for &o in &operands {
            acc += o;
            partials.push(acc);
        }
        let answer_value = acc;
        let mut prompt = vec![self.sum_id, SEP];
        prompt.extend(operands.iter().map(|&o| self.number_token(o)));
        CotProblem {
            operands,
            prompt,
            partials,
            answer_value,
            answer_token: self.number_token(answer_value),
        }
    }
}

impl Default for CotEnv {
    fn default() -> Self {
        CotEnv::new()
    }
}

pub enum Environment {
    Dialogue(DialogueEnv),
    Cot(CotEnv),
}

impl Environment {
    pub fn vocab(&self) -> &Vocab {
        match self {
            Environment::Dialogue(e) => &e.vocab,
            Environment::Cot(e) => &e.vocab,
        }
    }

    pub fn idf(&self) -> &IdfTable {
        match self {
            Environment::Dialogue(e) => &e.idf,
            Environment::Cot(e) => &e.idf,
        }
    }
}

// ---------------------------------------------------------------------------
// Episode data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Turn {
    pub prompt: TokenSeq,
    pub response: TokenSeq,
    /// History snapshot the response was generated against (H^(t)).
    pub history: History,
    pub attention: AggregatedAttention,
    pub reward: RewardBreakdown,
    pub old_logp: Vec<f64>,
    pub v_old: f64,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub kind: EpisodeKind,
    pub turns: Vec<Turn>,
    pub returns: Vec<f64>,
    pub final_answer_correct: Option<bool>,
    pub truncated_responses: usize,
}

impl Episode {
    /// Episodic reward: G^(1), the lambda-weighted sum over turns.
    pub fn episodic_reward(&self) -> f64 {
        self.returns.first().copied().unwrap_or(0.0)
    }
}

/// One candidate response at some turn.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub tokens: TokenSeq,
    pub old_logp: Vec<f64>,
    pub reward: RewardBreakdown,
    pub attention: AggregatedAttention,
    pub hit_max_len: bool,
}

/// All candidates of one turn plus what PPO needs to score them.
#[derive(Debug, Clone)]
pub struct TurnGroup {
    pub history: History,
    pub v_old: f64,
    pub candidates: Vec<Candidate>,
    /// Index of the candidate that extended the episode (argmax reward).
    pub chosen: usize,
    pub lambda: f64,
    /// Chain return from the next turn on (0 for the last turn).
    pub g_chain_next: f64,
    /// Chain return from this turn on.
    pub g_chain: f64,
}

impl TurnGroup {
    /// Candidate-level return: own reward at this turn plus the chain suffix.
    pub fn candidate_return(&self, i: usize) -> f64 {
        self.lambda * self.candidates[i].reward.r_turn + self.g_chain_next
    }
}

#[derive(Debug)]
pub struct EpisodeRollout {
    pub episode: Episode,
    pub groups: Vec<TurnGroup>,
}

/// Salient positions for a turn under the configured mode and scope.
/// `current_prompt_turn` identifies the prompt span for the current-prompt
/// ablation scope.
pub fn salient_positions(
    history: &History,
    idf: &IdfTable,
    cfg: &EpisodeConfig,
    current_prompt_turn: u32,
) -> Result<SalientSet> {
    match (&cfg.salience, cfg.scope) {
        (SalienceMode::Keywords { ids }, _) => select_keywords(history, ids),
        (SalienceMode::IdfTopK { k }, SalientScope::FullHistory) => {
            select_salient(history, idf, *k)
        }
        (SalienceMode::IdfTopK { k }, SalientScope::CurrentPrompt) => {
            let positions = history.prompt_positions(current_prompt_turn);
            match (positions.first(), positions.last()) {
                (Some(&lo), Some(&hi)) => select_salient_in(history, idf, *k, lo..hi + 1),
                _ => Err(Error::NoSalientCandidates),
            }
        }
    }
}

fn aggregate_candidate(
    gen: &GeneratedTurn,
    layers: usize,
    heads: usize,
    hist_len: usize,
    l_prime: usize,
    capacity: usize,
) -> Result<AggregatedAttention> {
    let mut buffer = CaptureBuffer::new(layers, heads, hist_len, capacity.max(1));
    for rec in &gen.captures {
        buffer.record_step(rec.clone())?;
    }
    aggregate(&buffer, l_prime)
}

fn standard_bans(ban_eos: bool) -> Vec<u32> {
    let mut ban = vec![PAD, BOS, SEP, UNK];
    if ban_eos {
        ban.push(EOS);
    }
    ban
}

/// Rolls out a T-turn dialogue. Per turn, samples `n_candidates` responses
/// with attention capture, scores each, extends the history with the
/// highest-reward candidate, and asks the simulator for the next prompt.
pub fn rollout_dialogue<A: Agent>(
    agent: &A,
    env: &DialogueEnv,
    ecfg: &EpisodeConfig,
    rcfg: &RewardConfig,
    sampler: &SamplerConfig,
    n_candidates: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeRollout> {
    assert!(ecfg.turns >= 1);
    assert!(n_candidates >= 1);
    let (layers, heads) = agent.attn_shape();
    let constraints = SampleConstraints {
        ban: standard_bans(ecfg.ban_eos),
        allow_only: None,
    };

    let mut history = History::with_bos();
    let mut mass = vec![0.0f64; history.len()];
    let prompt1 = env.initial_prompt(rng);
    history.push_prompt(&prompt1, 1);
    mass.resize(history.len(), 0.0);

    let mut turns: Vec<Turn> = Vec::with_capacity(ecfg.turns);
    let mut groups: Vec<TurnGroup> = Vec::with_capacity(ecfg.turns);
    let mut prompts: Vec<TokenSeq> = vec![prompt1];
    let mut truncated_responses = 0usize;

    for t in 1..=ecfg.turns {
        let salient = salient_positions(&history, &env.idf, ecfg, t as u32)?;
        let ctx = agent.turn_ctx(&history)?;
        let v_old = agent.value(&ctx)?;
        let seeds: Vec<u64> = (0..n_candidates).map(|_| rng.gen()).collect();
        let candidates: Vec<Candidate> = seeds
            .par_iter()
            .map(|&seed| -> Result<Candidate> {
                let mut crng = ChaCha8Rng::seed_from_u64(seed);
                let gen = agent.generate(
                    &ctx,
                    sampler,
                    ecfg.max_response_tokens,
                    &constraints,
                    &mut crng,
                )?;
                let attention = aggregate_candidate(
                    &gen,
                    layers,
                    heads,
                    history.len(),
                    ecfg.l_prime,
                    ecfg.max_response_tokens,
                )?;
                let reward = compute_breakdown(
                    &attention,
                    &salient,
                    &gen.tokens,
                    &history,
                    t,
                    &rcfg.weights,
                    &rcfg.clamp,
                    rcfg.rep_denominator,
                )?;
                Ok(Candidate {
                    hit_max_len: gen.hit_max_len,
                    old_logp: gen.logp,
                    tokens: gen.tokens,
                    reward,
                    attention,
                })
            })
            .collect::<Result<_>>()?;

        let chosen = candidates
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.reward
                    .r_turn
                    .partial_cmp(&b.reward.r_turn)
                    .unwrap()
                    .then(ib.cmp(ia)) // ties break toward the lower index
            })
            .map(|(i, _)| i)
            .unwrap();
        let best = &candidates[chosen];
        if best.hit_max_len && !ecfg.ban_eos {
            truncated_responses += 1;
        }
        for (m, a) in mass.iter_mut().zip(best.attention.column_mass()) {
            *m += a;
        }
        turns.push(Turn {
            prompt: prompts[t - 1].clone(),
            response: best.tokens.clone(),
            history: history.clone(),
            attention: best.attention.clone(),
            reward: best.reward.clone(),
            old_logp: best.old_logp.clone(),
            v_old,
        });
        groups.push(TurnGroup {
            history: history.clone(),
            v_old,
            candidates,
            chosen,
            lambda: 0.0,    // filled below
            g_chain_next: 0.0,
            g_chain: 0.0,
        });

        if t < ecfg.turns {
            let best_tokens = turns[t - 1].response.clone();
            history.push_sep();
            history.push_response(&best_tokens, t as u32);
            let next_prompt = env.simulate_user_turn(&history, rng)?;
            history.push_sep();
            history.push_prompt(&next_prompt, t as u32 + 1);
            prompts.push(next_prompt);
            mass.resize(history.len(), 0.0);
            maintain_history(agent, ecfg, &env.idf, &mut history, &mut mass)?;
        }
    }

    finish_rollout(EpisodeKind::Dialogue, turns, groups, rcfg, None, truncated_responses)
}

/// Shared helper for pruning/truncation between turns.
fn maintain_history<A: Agent>(
    agent: &A,
    ecfg: &EpisodeConfig,
    idf: &IdfTable,
    history: &mut History,
    mass: &mut Vec<f64>,
) -> Result<()> {
    if history.len() > ecfg.prune_max_len {
        let protected = match &ecfg.salience {
            SalienceMode::IdfTopK { k } => select_salient(history, idf, *k)?,
            SalienceMode::Keywords { ids } => select_keywords(history, ids)?,
        };
        let outcome = prune_history(history, mass, idf, ecfg.prune_max_len, ecfg.mass_floor, &protected);
        let new_mass: Vec<f64> = (0..history.len())
            .filter_map(|p| outcome.remap[p].map(|_| mass[p]))
            .collect();
        *history = outcome.history;
        *mass = new_mass;
    }
    let window = ecfg
        .truncate_m
        .min(agent.max_history_len().saturating_sub(1));
    if history.len() > window {
        let states = agent.encoder_states(history)?;
        let outcome = truncate_history(history, window, &states)?;
        if outcome.summary.is_some() {
            let dropped = history.len() - window;
            let mut new_mass = vec![0.0]; // SUMMARY starts with no mass
            new_mass.extend_from_slice(&mass[dropped..]);
            *history = outcome.history;
            *mass = new_mass;
        }
    }
    Ok(())
}

/// Rolls out one chain-of-thought episode: reasoning tokens in checkpoint
/// blocks (each block is a turn with the history frozen at its start),
/// then a forced answer marker and a single constrained answer token.
pub fn rollout_cot<A: Agent>(
    agent: &A,
    env: &CotEnv,
    problem: &CotProblem,
    ecfg: &EpisodeConfig,
    rcfg: &RewardConfig,
    sampler: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeRollout> {
    assert!(ecfg.block >= 1);
    let (layers, heads) = agent.attn_shape();
    let constraints = SampleConstraints {
        ban: standard_bans(ecfg.ban_eos),
        allow_only: None,
    };

    let mut history = History::with_bos();
    history.push_prompt(&problem.prompt, 1);

    let mut turns: Vec<Turn> = Vec::new();
    let mut groups: Vec<TurnGroup> = Vec::new();
    let mut generated = 0usize;
    let mut block_index = 0usize;
    let truncated_responses = 0usize;

    while generated < ecfg.cot_max_reasoning {
        let want = ecfg.block.min(ecfg.cot_max_reasoning - generated);
        let salient = salient_positions(&history, &env.idf, ecfg, 1)?;
        let ctx = agent.turn_ctx(&history)?;
        let v_old = agent.value(&ctx)?;
        let seed = rng.gen::<u64>();
        let mut crng = ChaCha8Rng::seed_from_u64(seed);
        let gen = agent.generate(&ctx, sampler, want, &constraints, &mut crng)?;
        let ended_early = !gen.hit_max_len;
        if gen.tokens.is_empty() {
            break; // empty reasoning trace; fall through to the answer block
        }
        block_index += 1;
        let turn_idx = block_index;
        let attention = aggregate_candidate(&gen, layers, heads, history.len(), ecfg.l_prime, want)?;
        let reward = compute_breakdown(
            &attention,
            &salient,
            &gen.tokens,
            &history,
            turn_idx,
            &rcfg.weights,
            &rcfg.clamp,
            rcfg.rep_denominator,
        )?;
        let old_logp = gen.logp.clone();
        generated += gen.tokens.len();
        let prompt = if turn_idx == 1 {
            problem.prompt.clone()
        } else {
            Vec::new()
        };
        turns.push(Turn {
            prompt,
            response: gen.tokens.clone(),
            history: history.clone(),
            attention: attention.clone(),
            reward: reward.clone(),
            old_logp: old_logp.clone(),
            v_old,
        });
        groups.push(TurnGroup {
            history: history.clone(),
            v_old,
            candidates: vec![Candidate {
                hit_max_len: gen.hit_max_len,
                tokens: gen.tokens.clone(),
                old_logp,
                reward,
                attention,
            }],
            chosen: 0,
            lambda: 0.0,
            g_chain_next: 0.0,
            g_chain: 0.0,
        });
        history.push_response(&gen.tokens, turn_idx as u32);
        if ended_early {
            break;
        }
    }

    // Forced answer marker, then one answer token constrained to numbers.
    history.push_tok(env.ans_id(), crate::history::Origin::Structural);
    let salient = salient_positions(&history, &env.idf, ecfg, 1)?;
    let ctx = agent.turn_ctx(&history)?;
    let v_old = agent.value(&ctx)?;
    let answer_constraints = SampleConstraints {
        ban: Vec::new(),
        allow_only: Some(env.number_ids().to_vec()),
    };
    let seed = rng.gen::<u64>();
    let mut crng = ChaCha8Rng::seed_from_u64(seed);
    let gen = agent.generate(&ctx, sampler, 1, &answer_constraints, &mut crng)?;
    if gen.tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    let answer_token = gen.tokens[0];
    let turn_idx = block_index + 1;
    let attention = aggregate_candidate(&gen, layers, heads, history.len(), ecfg.l_prime, 1)?;
    let reward = compute_breakdown(
        &attention,
        &salient,
        &gen.tokens,
        &history,
        turn_idx,
        &rcfg.weights,
        &rcfg.clamp,
        rcfg.rep_denominator,
    )?;
    let old_logp = gen.logp.clone();
    turns.push(Turn {
        prompt: vec![env.ans_id()],
        response: gen.tokens.clone(),
        history: history.clone(),
        attention: attention.clone(),
        reward: reward.clone(),
        old_logp: old_logp.clone(),
        v_old,
    });
    groups.push(TurnGroup {
        history: history.clone(),
        v_old,
        candidates: vec![Candidate {
            hit_max_len: gen.hit_max_len,
            tokens: gen.tokens,
            old_logp,
            reward,
            attention,
        }],
        chosen: 0,
        lambda: 0.0,
        g_chain_next: 0.0,
        g_chain: 0.0,
    });

    let correct = answer_token == problem.answer_token;
    finish_rollout(
        EpisodeKind::Cot,
        turns,
        groups,
        rcfg,
        Some(correct),
        truncated_responses,
    )
}

fn finish_rollout(
    kind: EpisodeKind,
    mut turns: Vec<Turn>,
    mut groups: Vec<TurnGroup>,
    rcfg: &RewardConfig,
    final_answer_correct: Option<bool>,
    truncated_responses: usize,
) -> Result<EpisodeRollout> {
    let rewards: Vec<f64> = turns.iter().map(|t| t.reward.r_turn).collect();
    let weights = rcfg.return_weights(rewards.len());
    let returns = cumulative_returns(&rewards, &weights)?;
    for (i, group) in groups.iter_mut().enumerate() {
        group.lambda = weights.lambdas[i];
        group.g_chain = returns[i];
        group.g_chain_next = if i + 1 < returns.len() {
            returns[i + 1]
        } else {
            0.0
        };
    }
    let episode = Episode {
        kind,
        turns: std::mem::take(&mut turns),
        returns,
        final_answer_correct,
        truncated_responses,
    };
    Ok(EpisodeRollout { episode, groups })
}

/// Collects a batch of independent episodes in parallel with per-episode
/// derived seeds (deterministic regardless of scheduling).
pub fn collect_batch<A: Agent>(
    agent: &A,
    env: &Environment,
    ecfg: &EpisodeConfig,
    rcfg: &RewardConfig,
    sampler: &SamplerConfig,
    n_candidates: usize,
    batch_episodes: usize,
    master_seed: u64,
) -> Result<Vec<EpisodeRollout>> {
    (0..batch_episodes)
        .into_par_iter()
        .map(|e| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(master_seed, &[e as u64]));
            match env {
                Environment::Dialogue(denv) => {
                    rollout_dialogue(agent, denv, ecfg, rcfg, sampler, n_candidates, &mut rng)
                }
                Environment::Cot(cenv) => {
                    let problem =
                        cenv.generate_problem(&mut rng, (2, 4), (1, 9));
                    rollout_cot(agent, cenv, &problem, ecfg, rcfg, sampler, &mut rng)
                }
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Episode dumps: tokens.txt (one turn per line, "prompt ids | response ids"),
// attn.bin (aggregated attention dump), rewards.jsonl.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnRewardRecord {
    pub turn: usize,
    pub cov: f64,
    pub foc: f64,
    pub rep: f64,
    pub r_turn: f64,
    pub clamped_steps: usize,
}

impl TurnRewardRecord {
    pub fn from_breakdown(turn: usize, b: &RewardBreakdown) -> Self {
        TurnRewardRecord {
            turn,
            cov: b.cov,
            foc: b.foc,
            rep: b.rep,
            r_turn: b.r_turn,
            clamped_steps: b.clamped_steps,
        }
    }
}

pub fn write_episode_dump(dir: &Path, episode: &Episode) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tokens = std::fs::File::create(dir.join("tokens.txt"))?;
    for turn in &episode.turns {
        let p: Vec<String> = turn.prompt.iter().map(|t| t.to_string()).collect();
        let r: Vec<String> = turn.response.iter().map(|t| t.to_string()).collect();
        writeln!(tokens, "{} | {}", p.join(" "), r.join(" "))?;
    }
    let attns: Vec<AggregatedAttention> =
        episode.turns.iter().map(|t| t.attention.clone()).collect();
    write_attention_dump(&dir.join("attn.bin"), &attns)?;
    let mut rewards = std::fs::File::create(dir.join("rewards.jsonl"))?;
    for (i, turn) in episode.turns.iter().enumerate() {
        let record = TurnRewardRecord::from_breakdown(i + 1, &turn.reward);
        writeln!(rewards, "{}", serde_json::to_string(&record).unwrap())?;
    }
    Ok(())
}

/// Reads tokens.txt back into (prompt, response) id pairs per turn.
pub fn read_tokens_file(path: &Path) -> Result<Vec<(TokenSeq, TokenSeq)>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        let (p, r) = line
            .split_once('|')
            .ok_or_else(|| Error::DumpFormat("tokens.txt line missing '|'".into()))?;
        let parse = |s: &str| -> Result<TokenSeq> {
            s.split_whitespace()
                .map(|w| {
                    w.parse::<u32>()
                        .map_err(|_| Error::DumpFormat(format!("bad token id {w}")))
                })
                .collect()
        };
        out.push((parse(p)?, parse(r)?));
    }
    Ok(out)
}

pub fn read_rewards_file(path: &Path) -> Result<Vec<TurnRewardRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::DumpFormat(format!("rewards.jsonl: {e}")))?,
        );
    }
    Ok(out)
}
